// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. Defaults are the MNIST-scale DCT-VAE setup.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dctvae {

enum class Likelihood { kBernoulli, kDiscretizedGaussian };
enum class ContextKind { kNone, kDct, kDownsample };

struct ModelConfig {
  int image_channels = 1;
  int image_side = 28;
  Likelihood likelihood = Likelihood::kBernoulli;
  // Resolution of each stochastic layer below the context, top first.
  std::vector<int> latent_layers{7, 7, 7, 14, 14, 14, 14};
  int latent_channels = 1;
  int input_width = 32;
  int hidden_width = 40;
  int mid_width = 20;
  int encoder_blocks = 1;
  ContextKind context = ContextKind::kDct;
  int context_side = 6;
  int context_window = 4;

  bool has_context() const { return context != ContextKind::kNone; }
  // Stochastic slots including the context.
  int slots() const { return static_cast<int>(latent_layers.size()) + (has_context() ? 1 : 0); }
  // Distinct latent resolutions, coarsest first.
  std::vector<int> scales() const;
  std::size_t layer_units(int layer) const;
  std::size_t latent_units() const;
  std::size_t context_units() const;
  void validate() const;
};

struct DiffusionConfig {
  int steps = 7;
  int width = 32;
  int blocks = 3;
  std::optional<double> beta_start;
  std::optional<double> beta_end;

  // Default endpoints: the 1000-step linear schedule rescaled to `steps`,
  // capped at kMaxDefaultBeta since the rescaled end exceeds 1 below 20 steps.
  static constexpr double kMaxDefaultBeta = 0.5;
  double start() const { return beta_start.value_or(std::min(1e-4 * 1000.0 / steps, kMaxDefaultBeta)); }
  double end() const { return beta_end.value_or(std::min(0.02 * 1000.0 / steps, kMaxDefaultBeta)); }
  void validate() const;
};

enum class Precision { kFloat32, kFloat64 };

struct TrainConfig {
  int epochs = 600;
  int batch_size = 128;
  double lr_start = 1e-3;
  double lr_end = 1e-5;
  double weight_decay = 1e-2;
  double grad_clip = 1.0;
  double skip_threshold = 100.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool dynamic_binarization = true;
  int checkpoint_every = 1;
  Precision precision = Precision::kFloat32;
  void validate() const;
};

struct DataConfig {
  std::string train_images = "mnist5k/train-images-idx3-ubyte.gz";
  std::string test_images = "mnist5k/t10k-images-idx3-ubyte.gz";
  int train_limit = 0;  // 0 keeps every image
  int test_limit = 0;
  // Side of the random crops taken from PPM sources; 0 disables cropping.
  int patch_side = 0;
  int patches_per_image = 0;
};

struct EvalConfig {
  int n_mc = 1;
  double au_threshold = 0.01;
  int iw_samples = 1;
  int batch_size = 100;
};

struct RunConfig {
  ModelConfig model;
  DiffusionConfig diffusion;
  TrainConfig trainer;
  DataConfig data;
  EvalConfig eval;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// INI text: "[section]" headers and "key = value" lines, or dotted keys at top
// level. '#' and ';' start comments. Unknown or repeated keys are rejected.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);
// Every key with its current value; parse_config(config_text(c)) == c.
std::string config_text(const RunConfig& c);

const char* likelihood_name(Likelihood l);
const char* context_kind_name(ContextKind k);
const char* precision_name(Precision p);

}  // namespace dctvae
