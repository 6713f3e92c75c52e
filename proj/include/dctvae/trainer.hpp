// SPDX-License-Identifier: Apache-2.0
//
// Optimization of the joint bound: cosine learning rate, AdamW with global
// norm clipping and step skipping, epoch loop with validation, checkpoints
// and a run manifest.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dctvae/checkpoint.hpp"
#include "dctvae/io.hpp"

namespace dctvae {

// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_end);

struct StepStats {
  double loss = 0;
  double grad_norm = 0;     // before clipping
  double applied_norm = 0;  // after clipping; 0 when skipped
  double lr = 0;
  bool skipped = false;
  std::vector<double> recon, kl, diffusion;  // per item
};

// Adam with decoupled weight decay over every parameter of a store.
template <class T>
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, ParameterStore<T>& store);

  // Consumes the gradients held by the store. Skips (leaving parameters and
  // moments untouched) when the global norm is non-finite or above the skip
  // threshold; otherwise clips to the clip norm in place and updates.
  StepStats apply(double lr);

  std::int64_t updates() const { return state_.updates; }
  const OptimizerState<T>& state() const { return state_; }
  void restore(OptimizerState<T> state);

 private:
  TrainConfig cfg_;
  std::vector<Parameter<T>*> params_;
  OptimizerState<T> state_;
};

// Pixels times channels of one image.
double data_dims(const ModelConfig& m);

// One optimizer step on a batch. Gradients are taken of the batch-mean bound
// divided by data_dims, so clip and skip thresholds act per dimension. A
// non-finite forward value counts as a skip.
template <class T>
StepStats train_step(JointModel<T>& model, AdamW<T>& opt, const Batch<T>& batch, const ObjectiveNoise<T>& noise,
                     double lr);

struct TrainingData {
  Dataset train, test;
};

// Loads the splits named by the data config relative to `root`. IDX paths
// give grayscale digits; a comma-separated list of PPM files gives random
// square patches (patch_side, patches_per_image), test patches drawn from a
// separate seed stream.
TrainingData load_training_data(const DataConfig& cfg, const std::filesystem::path& root, std::uint64_t seed);

// Pixels of a split in codec units for an epoch: a dynamic binarization draw
// for Bernoulli models, raw 0..255 otherwise. The test split uses one fixed
// draw.
Tensor<double> epoch_pixels(const RunConfig& cfg, const Dataset& d, bool test_split, std::int64_t epoch);

struct BoundSummary {
  double nelbo_nats = 0, kl_nats = 0, diff_nats = 0;
  std::vector<double> total;  // per item
};

// Mean negative joint bound over `pixels` with the full-sum diffusion bound
// and reproducible noise.
template <class T>
BoundSummary evaluate_bound(const JointModel<T>& model, const Tensor<double>& pixels, int batch_size,
                            std::uint64_t seed);

struct RunManifest {
  std::string config;
  std::uint64_t seed = 0;
  std::string precision;
  std::size_t parameter_count = 0;
  std::string train_source, train_checksum, test_source, test_checksum;
  int train_count = 0, test_count = 0;
  std::vector<EpochMetrics> metrics;
  std::vector<std::string> checkpoints;

  std::string to_json() const;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume;
  // Stop after this many epochs of the schedule have completed.
  std::optional<int> stop_after;
  std::function<void(const EpochMetrics&)> on_metrics;
};

template <class T>
struct TrainResult {
  RunManifest manifest;
  std::unique_ptr<JointModel<T>> model;
  TrainProgress progress;
};

template <class T>
TrainResult<T> run_training(const RunConfig& cfg, const TrainingData& data, const TrainOptions& options);

}  // namespace dctvae
