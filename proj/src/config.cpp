// SPDX-License-Identifier: Apache-2.0

#include "dctvae/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace dctvae {

std::vector<int> ModelConfig::scales() const {
  std::vector<int> s;
  for (int r : latent_layers)
    if (std::find(s.begin(), s.end(), r) == s.end()) s.push_back(r);
  return s;
}

std::size_t ModelConfig::layer_units(int layer) const {
  const auto r = static_cast<std::size_t>(latent_layers.at(static_cast<std::size_t>(layer)));
  return static_cast<std::size_t>(latent_channels) * r * r;
}

std::size_t ModelConfig::latent_units() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < latent_layers.size(); ++l) n += layer_units(static_cast<int>(l));
  return n;
}

std::size_t ModelConfig::context_units() const {
  if (context == ContextKind::kNone) return 0;
  const int side = context == ContextKind::kDct ? context_side : image_side / context_window;
  return static_cast<std::size_t>(image_channels) * side * side;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (image_channels < 1 || image_side < 1) fail("image_channels and image_side must be positive");
  if (latent_layers.empty()) fail("at least one latent layer is required");
  if (latent_channels < 1 || input_width < 1 || hidden_width < 1 || mid_width < 1 || encoder_blocks < 0)
    fail("widths must be positive");
  for (std::size_t i = 0; i < latent_layers.size(); ++i) {
    const int r = latent_layers[i];
    if (r < 1 || image_side % r) fail("latent resolution " + std::to_string(r) + " does not divide image side");
    if (i && r < latent_layers[i - 1]) fail("latent resolutions must be non-decreasing from the top");
  }
  const auto sc = scales();
  for (std::size_t i = 1; i < sc.size(); ++i)
    if (sc[i] % sc[i - 1]) fail("latent resolutions must be multiples of coarser ones");
  if (likelihood == Likelihood::kBernoulli && image_channels != 1) fail("bernoulli likelihood needs one channel");
  if (context == ContextKind::kDct && (context_side < 1 || context_side > image_side))
    fail("context_side outside [1, image_side]");
  if (context == ContextKind::kDownsample && (context_window < 1 || image_side % context_window))
    fail("context_window must divide image_side");
}

void DiffusionConfig::validate() const {
  if (steps < 1) throw ConfigError("diffusion: steps must be >= 1");
  if (width < 1 || blocks < 0) throw ConfigError("diffusion: width must be positive");
  const double a = start(), b = end();
  if (!(a > 0 && a <= b && b < 1))
    throw ConfigError("diffusion: need 0 < beta_start <= beta_end < 1, got " + std::to_string(a) + ", " +
                      std::to_string(b));
}

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size < 1) throw ConfigError("trainer: epochs >= 0 and batch_size >= 1 required");
  if (!(lr_start >= lr_end && lr_end > 0)) throw ConfigError("trainer: need lr_start >= lr_end > 0");
  if (!(grad_clip > 0)) throw ConfigError("trainer: grad_clip must be positive");
  if (!(skip_threshold >= grad_clip)) throw ConfigError("trainer: skip_threshold must be >= grad_clip");
  if (weight_decay < 0 || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0))
    throw ConfigError("trainer: invalid optimizer constants");
  if (checkpoint_every < 0) throw ConfigError("trainer: checkpoint_every must be >= 0");
}

const char* likelihood_name(Likelihood l) {
  return l == Likelihood::kBernoulli ? "bernoulli" : "discretized_gaussian";
}

const char* context_kind_name(ContextKind k) {
  switch (k) {
    case ContextKind::kNone: return "none";
    case ContextKind::kDct: return "dct";
    case ContextKind::kDownsample: return "downsample";
  }
  return "?";
}

const char* precision_name(Precision p) { return p == Precision::kFloat32 ? "float32" : "float64"; }

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

double parse_real(const std::string& v) {
  double d = 0;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, d);
  if (ec != std::errc() || p != end) throw std::invalid_argument("expected a real number, got '" + v + "'");
  return d;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

std::string real_text(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class M>
Field int_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = parse_number<int>(v); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}
template <class M>
Field real_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = parse_real(v); },
          [member](const RunConfig& c) { return real_text(member(const_cast<RunConfig&>(c))); }};
}
template <class M>
Field bool_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = parse_bool(v); },
          [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}
template <class M>
Field string_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = v; },
          [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
}
template <class M>
Field optional_real_field(M member) {
  return {[member](RunConfig& c, const std::string& v) {
            if (v == "auto")
              member(c).reset();
            else
              member(c) = parse_real(v);
          },
          [member](const RunConfig& c) {
            const auto& o = member(const_cast<RunConfig&>(c));
            return o ? real_text(*o) : std::string("auto");
          }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["model.image_channels"] = int_field([](RunConfig& c) -> int& { return c.model.image_channels; });
    t["model.image_side"] = int_field([](RunConfig& c) -> int& { return c.model.image_side; });
    t["model.likelihood"] = {
        [](RunConfig& c, const std::string& v) {
          if (v == "bernoulli")
            c.model.likelihood = Likelihood::kBernoulli;
          else if (v == "discretized_gaussian")
            c.model.likelihood = Likelihood::kDiscretizedGaussian;
          else
            throw std::invalid_argument("expected bernoulli or discretized_gaussian, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(likelihood_name(c.model.likelihood)); }};
    t["model.latent_layers"] = {
        [](RunConfig& c, const std::string& v) {
          std::vector<int> out;
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(trim(item)));
          if (out.empty()) throw std::invalid_argument("expected a comma-separated list of resolutions");
          c.model.latent_layers = out;
        },
        [](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.model.latent_layers.size(); ++i)
            s += (i ? "," : "") + std::to_string(c.model.latent_layers[i]);
          return s;
        }};
    t["model.latent_channels"] = int_field([](RunConfig& c) -> int& { return c.model.latent_channels; });
    t["model.input_width"] = int_field([](RunConfig& c) -> int& { return c.model.input_width; });
    t["model.hidden_width"] = int_field([](RunConfig& c) -> int& { return c.model.hidden_width; });
    t["model.mid_width"] = int_field([](RunConfig& c) -> int& { return c.model.mid_width; });
    t["model.encoder_blocks"] = int_field([](RunConfig& c) -> int& { return c.model.encoder_blocks; });
    t["model.context"] = {
        [](RunConfig& c, const std::string& v) {
          if (v == "none")
            c.model.context = ContextKind::kNone;
          else if (v == "dct")
            c.model.context = ContextKind::kDct;
          else if (v == "downsample")
            c.model.context = ContextKind::kDownsample;
          else
            throw std::invalid_argument("expected none, dct or downsample, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(context_kind_name(c.model.context)); }};
    t["model.context_side"] = int_field([](RunConfig& c) -> int& { return c.model.context_side; });
    t["model.context_window"] = int_field([](RunConfig& c) -> int& { return c.model.context_window; });

    t["diffusion.steps"] = int_field([](RunConfig& c) -> int& { return c.diffusion.steps; });
    t["diffusion.width"] = int_field([](RunConfig& c) -> int& { return c.diffusion.width; });
    t["diffusion.blocks"] = int_field([](RunConfig& c) -> int& { return c.diffusion.blocks; });
    t["diffusion.beta_start"] =
        optional_real_field([](RunConfig& c) -> std::optional<double>& { return c.diffusion.beta_start; });
    t["diffusion.beta_end"] =
        optional_real_field([](RunConfig& c) -> std::optional<double>& { return c.diffusion.beta_end; });

    t["trainer.epochs"] = int_field([](RunConfig& c) -> int& { return c.trainer.epochs; });
    t["trainer.batch_size"] = int_field([](RunConfig& c) -> int& { return c.trainer.batch_size; });
    t["trainer.lr_start"] = real_field([](RunConfig& c) -> double& { return c.trainer.lr_start; });
    t["trainer.lr_end"] = real_field([](RunConfig& c) -> double& { return c.trainer.lr_end; });
    t["trainer.weight_decay"] = real_field([](RunConfig& c) -> double& { return c.trainer.weight_decay; });
    t["trainer.grad_clip"] = real_field([](RunConfig& c) -> double& { return c.trainer.grad_clip; });
    t["trainer.skip_threshold"] = real_field([](RunConfig& c) -> double& { return c.trainer.skip_threshold; });
    t["trainer.beta1"] = real_field([](RunConfig& c) -> double& { return c.trainer.beta1; });
    t["trainer.beta2"] = real_field([](RunConfig& c) -> double& { return c.trainer.beta2; });
    t["trainer.adam_eps"] = real_field([](RunConfig& c) -> double& { return c.trainer.adam_eps; });
    t["trainer.seed"] = {[](RunConfig& c, const std::string& v) { c.trainer.seed = parse_number<std::uint64_t>(v); },
                         [](const RunConfig& c) { return std::to_string(c.trainer.seed); }};
    t["trainer.dynamic_binarization"] =
        bool_field([](RunConfig& c) -> bool& { return c.trainer.dynamic_binarization; });
    t["trainer.checkpoint_every"] = int_field([](RunConfig& c) -> int& { return c.trainer.checkpoint_every; });

    t["trainer.precision"] = {
        [](RunConfig& c, const std::string& v) {
          if (v == "float32")
            c.trainer.precision = Precision::kFloat32;
          else if (v == "float64")
            c.trainer.precision = Precision::kFloat64;
          else
            throw std::invalid_argument("expected float32 or float64, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(precision_name(c.trainer.precision)); }};

    t["data.train_images"] = string_field([](RunConfig& c) -> std::string& { return c.data.train_images; });
    t["data.test_images"] = string_field([](RunConfig& c) -> std::string& { return c.data.test_images; });
    t["data.train_limit"] = int_field([](RunConfig& c) -> int& { return c.data.train_limit; });
    t["data.test_limit"] = int_field([](RunConfig& c) -> int& { return c.data.test_limit; });
    t["data.patch_side"] = int_field([](RunConfig& c) -> int& { return c.data.patch_side; });
    t["data.patches_per_image"] = int_field([](RunConfig& c) -> int& { return c.data.patches_per_image; });

    t["eval.n_mc"] = int_field([](RunConfig& c) -> int& { return c.eval.n_mc; });
    t["eval.au_threshold"] = real_field([](RunConfig& c) -> double& { return c.eval.au_threshold; });
    t["eval.iw_samples"] = int_field([](RunConfig& c) -> int& { return c.eval.iw_samples; });
    t["eval.batch_size"] = int_field([](RunConfig& c) -> int& { return c.eval.batch_size; });
    return t;
  }();
  return table;
}

}  // namespace

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find_first_of("#;")));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": key '" + key + "': " + e.what());
    }
  }
  cfg.model.validate();
  cfg.diffusion.validate();
  cfg.trainer.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string config_text(const RunConfig& c) {
  std::string out, section;
  for (const auto& [key, field] : fields()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + field.get(c) + "\n";
  }
  return out;
}

}  // namespace dctvae
