// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "countadapt/common.hpp"

namespace countadapt {

/// Optimizer and schedule settings. Defaults are desk scale; paper_defaults() restores the
/// 10,000-iteration / batch-256 schedule.
struct TrainConfig {
  double learning_rate = 0.1;
  double weight_decay = 1e-3;
  int iterations = 2000;
  int batch_size = 64;
  std::uint64_t seed = 0;
  double adagrad_epsilon = 1e-7;
  /// Starting value of every AdaGrad accumulator. With 0 the first step moves each parameter by
  /// the full learning rate regardless of its gradient's size.
  double initial_accumulator = 0.1;

  void validate() const;
  static TrainConfig paper_defaults();
};

struct AdagradResult {
  double param;
  double accum;
};

/// g = grad + decay·param; accum' = accum + g²; param' = param − lr·g / (√accum' + ε).
AdagradResult adagrad_step(double param, double grad, double accum, double learning_rate,
                           double decay, double epsilon);

/// Element-wise adagrad_step over matching spans.
void adagrad_update(std::span<double> params, std::span<const double> grads, std::span<double> accum,
                    double learning_rate, double decay, double epsilon);

/// Seeded shuffling with wraparound epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  /// Advances the stream as if `batches` calls to next() had been made.
  void skip(std::uint64_t batches);

 private:
  void reshuffle();

  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Per-iteration training record.
struct TrainLog {
  std::vector<double> loss;
};

}  // namespace countadapt
