// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files ("DCTC"): config echo, codec, named parameters, optimizer
// moments and training progress. Loading validates every parameter name and
// shape against a freshly built model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dctvae/joint.hpp"

namespace dctvae {

struct EpochMetrics {
  int epoch = 0;
  std::string split;  // "train" or "val"
  double nelbo_nats = 0, kl_nats = 0, diff_nats = 0;
  std::int64_t skips = 0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct TrainProgress {
  std::int64_t epoch = 0;  // completed epochs
  std::int64_t step = 0;   // completed steps, skipped ones included
  std::int64_t skips = 0;

  friend bool operator==(const TrainProgress&, const TrainProgress&) = default;
};

// Moments aligned with ParameterStore order.
template <class T>
struct OptimizerState {
  std::int64_t updates = 0;
  std::vector<Tensor<T>> first, second;
};

template <class T>
struct Checkpoint {
  RunConfig config;
  std::optional<ContextCodec> codec;
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::optional<OptimizerState<T>> optimizer;
  TrainProgress progress;
  std::vector<EpochMetrics> history;
};

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const JointModel<T>& model, const OptimizerState<T>* optimizer,
                                               const TrainProgress& progress, const std::vector<EpochMetrics>& history);
template <class T>
Checkpoint<T> parse_checkpoint(std::span<const std::uint8_t> bytes);

template <class T>
void save_checkpoint(const std::filesystem::path& path, const JointModel<T>& model, const OptimizerState<T>* optimizer,
                     const TrainProgress& progress, const std::vector<EpochMetrics>& history);
template <class T>
Checkpoint<T> read_checkpoint(const std::filesystem::path& path);

// Value type a checkpoint file was written with, read from its header.
Precision checkpoint_precision(const std::filesystem::path& path);

// Builds the model described by the checkpoint and installs its parameters.
template <class T>
std::unique_ptr<JointModel<T>> restore_model(const Checkpoint<T>& ckpt);

// Copies named values into the model; throws on a missing, extra or
// mis-shaped parameter.
template <class T>
void install_parameters(JointModel<T>& model, const std::vector<std::pair<std::string, Tensor<T>>>& params);

}  // namespace dctvae
