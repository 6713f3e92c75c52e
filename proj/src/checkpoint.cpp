// SPDX-License-Identifier: Apache-2.0

#include "dctvae/checkpoint.hpp"

#include <stdexcept>

#include "dctvae/binary_io.hpp"
#include "dctvae/io.hpp"

namespace dctvae {
namespace {

constexpr std::uint16_t kVersion = 1;

void put_codec(ByteWriter& w, const std::optional<ContextCodec>& codec) {
  w.put<std::uint8_t>(codec ? 1 : 0);
  if (!codec) return;
  w.put<std::uint8_t>(static_cast<std::uint8_t>(codec->mode));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(codec->channels));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(codec->side));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(codec->context_side));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(codec->window));
  w.put<double>(codec->pixel_max);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(codec->scale.size()));
  for (double s : codec->scale.values()) w.put<double>(s);
}

std::optional<ContextCodec> get_codec(ByteReader& r) {
  if (r.get<std::uint8_t>("codec flag") == 0) return std::nullopt;
  const auto mode = r.get<std::uint8_t>("codec mode");
  if (mode > 1) r.fail("unknown context mode " + std::to_string(mode));
  const int ch = r.get<std::uint16_t>("codec channels");
  const int side = r.get<std::uint16_t>("codec side");
  const int d = r.get<std::uint16_t>("codec context side");
  const int window = r.get<std::uint16_t>("codec window");
  const double pmax = r.get<double>("codec pixel max");
  const auto n = r.get<std::uint32_t>("codec scale count");
  std::vector<double> s(n);
  for (auto& v : s) v = r.get<double>("codec scale");
  try {
    ContextCodec c = static_cast<ContextMode>(mode) == ContextMode::kDct
                         ? ContextCodec::dct(ch, side, d, pmax, Tensor<double>({ch, d, d}, std::move(s)))
                         : ContextCodec::downsample(ch, side, window, pmax);
    c.validate();
    return c;
  } catch (const std::invalid_argument& e) {
    r.fail(std::string("invalid codec: ") + e.what());
  }
}

template <class T>
void put_tensor(ByteWriter& w, const Tensor<T>& t) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (T v : t.values()) w.put<T>(v);
}

template <class T>
Tensor<T> get_tensor(ByteReader& r, int width) {
  const int rank = r.get<std::uint8_t>("tensor rank");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) {
    const auto v = r.get<std::uint32_t>("tensor extent");
    if (v == 0 || v > (1u << 24)) r.fail("implausible tensor extent " + std::to_string(v));
    d = static_cast<int>(v);
  }
  const std::size_t n = shape_size(shape);
  if (n * static_cast<std::size_t>(width) > r.remaining())
    r.fail("truncated tensor data: need " + std::to_string(n * width) + " bytes, have " + std::to_string(r.remaining()));
  std::vector<T> v(n);
  for (auto& x : v) x = width == 4 ? static_cast<T>(r.get<float>("value")) : static_cast<T>(r.get<double>("value"));
  return Tensor<T>(std::move(shape), std::move(v));
}

void put_metrics(ByteWriter& w, const std::vector<EpochMetrics>& history) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(history.size()));
  for (const auto& m : history) {
    w.put<std::int32_t>(m.epoch);
    w.put_string(m.split);
    w.put<double>(m.nelbo_nats);
    w.put<double>(m.kl_nats);
    w.put<double>(m.diff_nats);
    w.put<std::int64_t>(m.skips);
  }
}

std::vector<EpochMetrics> get_metrics(ByteReader& r) {
  std::vector<EpochMetrics> out(r.get<std::uint32_t>("metrics count"));
  for (auto& m : out) {
    m.epoch = r.get<std::int32_t>("epoch");
    m.split = r.get_string("split");
    m.nelbo_nats = r.get<double>("nelbo");
    m.kl_nats = r.get<double>("kl");
    m.diff_nats = r.get<double>("diffusion");
    m.skips = r.get<std::int64_t>("skips");
  }
  return out;
}

}  // namespace

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const JointModel<T>& model, const OptimizerState<T>* optimizer,
                                               const TrainProgress& progress,
                                               const std::vector<EpochMetrics>& history) {
  ByteWriter w;
  w.put_tag("DCTC");
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint8_t>(sizeof(T));
  w.put_string(config_text(model.config()));
  put_codec(w, model.codec() ? std::optional<ContextCodec>(*model.codec()) : std::nullopt);
  const auto params = model.params().all();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.put_string(p->name());
    put_tensor(w, p->value());
  }
  w.put<std::uint8_t>(optimizer ? 1 : 0);
  if (optimizer) {
    if (optimizer->first.size() != params.size() || optimizer->second.size() != params.size())
      throw std::invalid_argument("serialize_checkpoint: optimizer state does not match the parameters");
    w.put<std::int64_t>(optimizer->updates);
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_tensor(w, optimizer->first[i]);
      put_tensor(w, optimizer->second[i]);
    }
  }
  w.put<std::int64_t>(progress.epoch);
  w.put<std::int64_t>(progress.step);
  w.put<std::int64_t>(progress.skips);
  put_metrics(w, history);
  return w.take();
}

template <class T>
Checkpoint<T> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("DCTC");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const int width = r.get<std::uint8_t>("value width");
  if (width != 4 && width != 8) r.fail("unsupported value width " + std::to_string(width));
  Checkpoint<T> c;
  const std::size_t cfg_at = r.pos();
  const std::string text = r.get_string("config");
  try {
    c.config = parse_config(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config: ") + e.what(), cfg_at);
  }
  c.codec = get_codec(r);
  const auto n = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.get_string("parameter name");
    c.params.emplace_back(std::move(name), get_tensor<T>(r, width));
  }
  if (r.get<std::uint8_t>("optimizer flag")) {
    OptimizerState<T> o;
    o.updates = r.get<std::int64_t>("update count");
    for (std::uint32_t i = 0; i < n; ++i) {
      o.first.push_back(get_tensor<T>(r, width));
      o.second.push_back(get_tensor<T>(r, width));
      if (o.first.back().shape() != c.params[i].second.shape() || o.second.back().shape() != c.params[i].second.shape())
        r.fail("optimizer moment shape mismatch for '" + c.params[i].first + "'");
    }
    c.optimizer = std::move(o);
  }
  c.progress.epoch = r.get<std::int64_t>("epoch");
  c.progress.step = r.get<std::int64_t>("step");
  c.progress.skips = r.get<std::int64_t>("skips");
  c.history = get_metrics(r);
  if (r.remaining() != 0) r.fail("trailing bytes after checkpoint");
  return c;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const JointModel<T>& model, const OptimizerState<T>* optimizer,
                     const TrainProgress& progress, const std::vector<EpochMetrics>& history) {
  const auto bytes = serialize_checkpoint(model, optimizer, progress, history);
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

template <class T>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_checkpoint<T>(bytes);
  } catch (const FormatError& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

Precision checkpoint_precision(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    ByteReader r(bytes);
    r.expect_tag("DCTC");
    const auto version = r.get<std::uint16_t>("version");
    if (version != kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    const int width = r.get<std::uint8_t>("value width");
    if (width == 4) return Precision::kFloat32;
    if (width == 8) return Precision::kFloat64;
    r.fail("unsupported value width " + std::to_string(width));
  } catch (const FormatError& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

template <class T>
void install_parameters(JointModel<T>& model, const std::vector<std::pair<std::string, Tensor<T>>>& params) {
  auto& store = model.params();
  if (params.size() != store.all().size())
    throw std::invalid_argument("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                                std::to_string(store.all().size()));
  for (const auto& [name, value] : params) {
    Parameter<T>* p = store.find(name);
    if (!p) throw std::invalid_argument("checkpoint parameter '" + name + "' is not part of the model");
    if (p->value().shape() != value.shape())
      throw std::invalid_argument("checkpoint parameter '" + name + "' has shape " + shape_str(value.shape()) +
                                  ", model expects " + shape_str(p->value().shape()));
  }
  for (const auto& [name, value] : params) store.find(name)->value() = value;
}

template <class T>
std::unique_ptr<JointModel<T>> restore_model(const Checkpoint<T>& ckpt) {
  auto model = std::make_unique<JointModel<T>>(ckpt.config, ckpt.codec, 0);
  install_parameters(*model, ckpt.params);
  return model;
}

#define DCTVAE_INSTANTIATE_CHECKPOINT(T)                                                                       \
  template std::vector<std::uint8_t> serialize_checkpoint<T>(const JointModel<T>&, const OptimizerState<T>*,   \
                                                             const TrainProgress&,                              \
                                                             const std::vector<EpochMetrics>&);                 \
  template Checkpoint<T> parse_checkpoint<T>(std::span<const std::uint8_t>);                                   \
  template void save_checkpoint<T>(const std::filesystem::path&, const JointModel<T>&, const OptimizerState<T>*, \
                                   const TrainProgress&, const std::vector<EpochMetrics>&);                     \
  template Checkpoint<T> read_checkpoint<T>(const std::filesystem::path&);                                     \
  template void install_parameters<T>(JointModel<T>&, const std::vector<std::pair<std::string, Tensor<T>>>&);  \
  template std::unique_ptr<JointModel<T>> restore_model<T>(const Checkpoint<T>&);

DCTVAE_INSTANTIATE_CHECKPOINT(float)
DCTVAE_INSTANTIATE_CHECKPOINT(double)

}  // namespace dctvae
