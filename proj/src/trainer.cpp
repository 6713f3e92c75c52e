// SPDX-License-Identifier: Apache-2.0

#include "dctvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dctvae {
namespace {

// Seed streams; every random draw is a pure function of (seed, stream, ...).
enum Stream : std::uint64_t {
  kInit = 1,
  kShuffle = 2,
  kStepNoise = 3,
  kValidation = 4,
  kTestDraw = 5,
  kTrainPatches = 6,
  kTestPatches = 7,
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

bool is_ppm_list(const std::string& s) {
  const auto items = split_list(s);
  return !items.empty() && std::all_of(items.begin(), items.end(), [](const std::string& p) {
    return p.size() > 4 && p.compare(p.size() - 4, 4, ".ppm") == 0;
  });
}

Dataset load_split(const DataConfig& cfg, const std::string& spec, const std::filesystem::path& root, int limit,
                   std::uint64_t patch_seed) {
  if (is_ppm_list(spec)) {
    if (cfg.patch_side < 1 || cfg.patches_per_image < 1)
      throw std::invalid_argument("data: PPM sources need patch_side and patches_per_image");
    std::vector<RgbImage> images;
    for (const auto& p : split_list(spec)) images.push_back(load_ppm(root / p));
    Dataset d = random_patches(images, cfg.patch_side, cfg.patches_per_image, patch_seed);
    d.source = spec;
    return d.head(limit);
  }
  return load_idx(root / spec).head(limit);
}

Tensor<double> gather_rows(const Tensor<double>& all, std::span<const int> idx) {
  Shape s = all.shape();
  const std::size_t per = all.size() / static_cast<std::size_t>(s[0]);
  s[0] = static_cast<int>(idx.size());
  Tensor<double> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(all.data() + static_cast<std::size_t>(idx[i]) * per, per, out.data() + i * per);
  return out;
}

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,split,nelbo_nats,kl_nats,diff_nats,skips\n";
  for (const auto& m : rows)
    os << m.epoch << ',' << m.split << ',' << m.nelbo_nats << ',' << m.kl_nats << ',' << m.diff_nats << ','
       << m.skips << '\n';
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end) {
  if (total_steps <= 0) return lr_start;
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  if (step == total_steps) return lr_end;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

template <class T>
AdamW<T>::AdamW(const TrainConfig& cfg, ParameterStore<T>& store) : cfg_(cfg), params_(store.all()) {
  cfg_.validate();
  for (auto* p : params_) {
    state_.first.emplace_back(p->value().shape());
    state_.second.emplace_back(p->value().shape());
  }
}

template <class T>
void AdamW<T>::restore(OptimizerState<T> state) {
  if (state.first.size() != params_.size() || state.second.size() != params_.size())
    throw std::invalid_argument("AdamW::restore: state covers " + std::to_string(state.first.size()) +
                                " parameters, expected " + std::to_string(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (state.first[i].shape() != params_[i]->value().shape() || state.second[i].shape() != params_[i]->value().shape())
      throw std::invalid_argument("AdamW::restore: moment shape mismatch for '" + params_[i]->name() + "'");
  state_ = std::move(state);
}

template <class T>
StepStats AdamW<T>::apply(double lr) {
  StepStats st;
  st.lr = lr;
  double sq = 0;
  for (const auto* p : params_)
    for (T g : p->grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  st.grad_norm = std::sqrt(sq);
  if (!std::isfinite(st.grad_norm) || st.grad_norm > cfg_.skip_threshold) {
    st.skipped = true;
    return st;
  }
  if (st.grad_norm > cfg_.grad_clip) {
    const double factor = cfg_.grad_clip / st.grad_norm;
    for (auto* p : params_)
      for (T& g : p->grad().values()) g = static_cast<T>(g * factor);
  }
  sq = 0;
  for (const auto* p : params_)
    for (T g : p->grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  st.applied_norm = std::sqrt(sq);

  ++state_.updates;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state_.updates));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state_.updates));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    T* w = params_[i]->value().data();
    const T* g = params_[i]->grad().data();
    T* m = state_.first[i].data();
    T* v = state_.second[i].data();
    for (std::size_t j = 0; j < params_[i]->value().size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1 - b1) * gj;
      const double vj = b2 * v[j] + (1 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double step = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.adam_eps);
      w[j] = static_cast<T>(w[j] * decay - lr * step);
    }
  }
  return st;
}

double data_dims(const ModelConfig& m) {
  return static_cast<double>(m.image_channels) * m.image_side * m.image_side;
}

template <class T>
StepStats train_step(JointModel<T>& model, AdamW<T>& opt, const Batch<T>& batch, const ObjectiveNoise<T>& noise,
                     double lr) {
  model.params().zero_grad();
  double loss = 0;
  std::vector<double> recon, kl, diffusion;
  try {
    Tape<T> tape;
    auto obj = joint_objective(tape, model, batch, noise);
    tape.backward(scale(obj.loss, static_cast<T>(1.0 / data_dims(model.model_config()))));
    loss = obj.loss.value()[0];
    recon = std::move(obj.recon);
    kl = std::move(obj.kl);
    diffusion = std::move(obj.diffusion);
  } catch (const NonFiniteError&) {
    StepStats st;
    st.lr = lr;
    st.skipped = true;
    st.loss = st.grad_norm = std::numeric_limits<double>::quiet_NaN();
    return st;
  }
  StepStats st = opt.apply(lr);
  st.loss = loss;
  st.recon = std::move(recon);
  st.kl = std::move(kl);
  st.diffusion = std::move(diffusion);
  return st;
}

TrainingData load_training_data(const DataConfig& cfg, const std::filesystem::path& root, std::uint64_t seed) {
  TrainingData d;
  d.train = load_split(cfg, cfg.train_images, root, cfg.train_limit, derive_seed(seed, kTrainPatches));
  d.test = load_split(cfg, cfg.test_images, root, cfg.test_limit, derive_seed(seed, kTestPatches));
  return d;
}

Tensor<double> epoch_pixels(const RunConfig& cfg, const Dataset& d, bool test_split, std::int64_t epoch) {
  if (cfg.model.likelihood == Likelihood::kBernoulli) {
    if (!cfg.trainer.dynamic_binarization || test_split)
      return binarize_dynamic(d, derive_seed(cfg.trainer.seed, kTestDraw), 0);
    return binarize_dynamic(d, cfg.trainer.seed, static_cast<std::uint64_t>(epoch));
  }
  return d.as_tensor();
}

template <class T>
BoundSummary evaluate_bound(const JointModel<T>& model, const Tensor<double>& pixels, int batch_size,
                            std::uint64_t seed) {
  if (pixels.rank() != 4 || pixels.dim(0) < 1) throw std::invalid_argument("evaluate_bound: empty evaluation set");
  if (batch_size < 1) throw std::invalid_argument("evaluate_bound: batch_size must be positive");
  BoundSummary out;
  const int n = pixels.dim(0);
  double kl = 0, diff = 0;
  for (int b0 = 0, chunk = 0; b0 < n; b0 += batch_size, ++chunk) {
    std::vector<int> idx(static_cast<std::size_t>(std::min(batch_size, n - b0)));
    std::iota(idx.begin(), idx.end(), b0);
    const auto batch = make_batch(model, gather_rows(pixels, idx));
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(chunk)));
    const auto noise = draw_objective_noise(model, batch.size(), false, rng);
    Tape<T> tape;
    const auto obj = joint_objective(tape, model, batch, noise);
    out.total.insert(out.total.end(), obj.total.begin(), obj.total.end());
    kl = std::accumulate(obj.kl.begin(), obj.kl.end(), kl);
    diff = std::accumulate(obj.diffusion.begin(), obj.diffusion.end(), diff);
  }
  out.nelbo_nats = std::accumulate(out.total.begin(), out.total.end(), 0.0) / n;
  out.kl_nats = kl / n;
  out.diff_nats = diff / n;
  return out;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = config;
  j["seed"] = seed;
  j["precision"] = precision;
  j["parameter_count"] = parameter_count;
  j["data"]["train"] = {{"source", train_source}, {"checksum", train_checksum}, {"count", train_count}};
  j["data"]["test"] = {{"source", test_source}, {"checksum", test_checksum}, {"count", test_count}};
  j["metrics"] = nlohmann::ordered_json::array();
  for (const auto& m : metrics)
    j["metrics"].push_back({{"epoch", m.epoch},
                            {"split", m.split},
                            {"nelbo_nats", m.nelbo_nats},
                            {"kl_nats", m.kl_nats},
                            {"diff_nats", m.diff_nats},
                            {"skips", m.skips}});
  j["checkpoints"] = checkpoints;
  return j.dump(2) + "\n";
}

template <class T>
TrainResult<T> run_training(const RunConfig& cfg, const TrainingData& data, const TrainOptions& options) {
  cfg.model.validate();
  cfg.diffusion.validate();
  cfg.trainer.validate();
  if (data.train.count < 1 || data.test.count < 1) throw std::invalid_argument("run_training: empty dataset split");
  const std::uint64_t seed = cfg.trainer.seed;

  TrainResult<T> result;
  RunManifest& man = result.manifest;
  man.config = config_text(cfg);
  man.seed = seed;
  man.precision = precision_name(cfg.trainer.precision);
  man.train_source = data.train.source;
  man.train_checksum = data.train.checksum();
  man.train_count = data.train.count;
  man.test_source = data.test.source;
  man.test_checksum = data.test.checksum();
  man.test_count = data.test.count;

  const bool write = !options.out_dir.empty();
  if (write) std::filesystem::create_directories(options.out_dir);
  const auto flush = [&] {
    if (!write) return;
    write_text(options.out_dir / "manifest.json", man.to_json());
    write_text(options.out_dir / "metrics.csv", metrics_csv(man.metrics));
  };

  std::optional<Checkpoint<T>> ckpt;
  if (options.resume) {
    ckpt = read_checkpoint<T>(*options.resume);
    if (config_text(ckpt->config) != man.config)
      throw std::invalid_argument("run_training: checkpoint config differs from the run config");
  }
  const auto codec = ckpt ? ckpt->codec : make_codec(cfg.model, epoch_pixels(cfg, data.train, false, 0));
  result.model = std::make_unique<JointModel<T>>(cfg, codec, derive_seed(seed, kInit));
  JointModel<T>& model = *result.model;
  man.parameter_count = model.params().scalar_count();
  AdamW<T> opt(cfg.trainer, model.params());
  TrainProgress& progress = result.progress;
  if (ckpt) {
    install_parameters(model, ckpt->params);
    if (!ckpt->optimizer) throw std::invalid_argument("run_training: checkpoint has no optimizer state to resume");
    opt.restore(*ckpt->optimizer);
    progress = ckpt->progress;
    man.metrics = ckpt->history;
  }

  const int n = data.train.count;
  const int bs = cfg.trainer.batch_size;
  const std::int64_t steps_per_epoch = (n + bs - 1) / bs;
  const std::int64_t total_steps = steps_per_epoch * cfg.trainer.epochs;
  const Tensor<double> test_pixels = epoch_pixels(cfg, data.test, true, 0);

  try {
    flush();
    for (std::int64_t e = progress.epoch; e < cfg.trainer.epochs; ++e) {
      if (options.stop_after && e >= *options.stop_after) break;
      const Tensor<double> pixels = epoch_pixels(cfg, data.train, false, e);
      std::vector<int> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng(derive_seed(seed, kShuffle, static_cast<std::uint64_t>(e)));
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      double sum_total = 0, sum_kl = 0, sum_diff = 0;
      std::int64_t counted = 0;
      for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
        const int b0 = static_cast<int>(s * bs);
        const std::span<const int> idx(order.data() + b0, static_cast<std::size_t>(std::min(bs, n - b0)));
        const auto batch = make_batch(model, gather_rows(pixels, idx));
        Rng rng(derive_seed(seed, kStepNoise, static_cast<std::uint64_t>(progress.step)));
        const auto noise = draw_objective_noise(model, batch.size(), true, rng);
        const double lr = cosine_lr(progress.step, total_steps, cfg.trainer.lr_start, cfg.trainer.lr_end);
        const StepStats st = train_step(model, opt, batch, noise, lr);
        ++progress.step;
        if (st.skipped) ++progress.skips;
        if (!st.recon.empty()) {
          for (std::size_t i = 0; i < st.recon.size(); ++i) {
            sum_total += st.recon[i] + st.kl[i] + st.diffusion[i];
            sum_kl += st.kl[i];
            sum_diff += st.diffusion[i];
          }
          counted += static_cast<std::int64_t>(st.recon.size());
        }
      }
      progress.epoch = e + 1;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      const double c = static_cast<double>(counted);
      EpochMetrics train_row{static_cast<int>(e + 1), "train", counted ? sum_total / c : nan,
                             counted ? sum_kl / c : nan, counted ? sum_diff / c : nan, progress.skips};
      const BoundSummary val = evaluate_bound(model, test_pixels, cfg.eval.batch_size, derive_seed(seed, kValidation));
      EpochMetrics val_row{static_cast<int>(e + 1), "val", val.nelbo_nats, val.kl_nats, val.diff_nats, progress.skips};
      for (const auto& row : {train_row, val_row}) {
        man.metrics.push_back(row);
        if (options.on_metrics) options.on_metrics(row);
      }
      const bool last = e + 1 == cfg.trainer.epochs;
      const int every = cfg.trainer.checkpoint_every;
      if (write && ((every > 0 && (e + 1) % every == 0) || last)) {
        std::ostringstream name;
        name << "epoch_" << std::setw(4) << std::setfill('0') << e + 1 << ".dctc";
        const auto path = options.out_dir / name.str();
        save_checkpoint(path, model, &opt.state(), progress, man.metrics);
        man.checkpoints.push_back(path.string());
      }
      flush();
    }
  } catch (...) {
    try {
      flush();
    } catch (...) {
    }
    throw;
  }
  return result;
}

#define DCTVAE_INSTANTIATE_TRAINER(T)                                                                      \
  template class AdamW<T>;                                                                                 \
  template StepStats train_step<T>(JointModel<T>&, AdamW<T>&, const Batch<T>&, const ObjectiveNoise<T>&, double); \
  template BoundSummary evaluate_bound<T>(const JointModel<T>&, const Tensor<double>&, int, std::uint64_t); \
  template TrainResult<T> run_training<T>(const RunConfig&, const TrainingData&, const TrainOptions&);

DCTVAE_INSTANTIATE_TRAINER(float)
DCTVAE_INSTANTIATE_TRAINER(double)

}  // namespace dctvae
