// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "countadapt/common.hpp"

namespace countadapt {

enum class Mode { train, infer };

/// Residual adapter: y = x + gamma ⊙ BN(x), BN(x) = bn_gain ⊙ (x − μ)/√(σ² + ε) + bn_bias.
/// Train mode normalizes with batch statistics (biased variance); infer mode with the
/// running statistics.
struct AdapterModule {
  int dim = 0;
  Vector gamma;
  Vector bn_gain;
  Vector bn_bias;
  Vector running_mean;
  Vector running_var;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.99;
};

/// gamma = 0, gain = 1, bias = 0, running stats (0, 1). The module is the identity.
AdapterModule init_adapter(int dim);

/// Trainable entries of one module (or gradients / AdaGrad accumulators shaped like them).
struct AdapterTrainables {
  Vector gamma;
  Vector bn_gain;
  Vector bn_bias;

  static AdapterTrainables zeros(int dim);
  static AdapterTrainables of(const AdapterModule& m);
};

/// Whatever the backward pass needs from a forward call.
struct AdapterCache {
  Mode mode = Mode::infer;
  Matrix xhat;        // normalized input, batch × dim
  Vector batch_mean;  // train mode only
  Vector batch_var;   // train mode only (biased)
  Vector inv_std;     // 1/√(var + ε) of whichever statistics were used
};

/// Pure forward; never touches running statistics. Channels with gamma == 0 pass x through
/// untouched, so a freshly initialized module is the identity bit for bit.
/// Throws batch_too_small for a single-row batch in train mode.
Matrix adapter_forward(const Matrix& x, const AdapterModule& module, Mode mode,
                       AdapterCache* cache = nullptr);

/// Train-mode forward that also folds the batch statistics into the running statistics.
Matrix adapter_forward_train(const Matrix& x, AdapterModule& module, AdapterCache* cache = nullptr);

/// running ← momentum · running + (1 − momentum) · batch.
void update_running_stats(AdapterModule& module, const AdapterCache& cache);

/// Accumulates parameter gradients into `grads` and returns dL/dx.
Matrix adapter_backward(const Matrix& dy, const AdapterModule& module, const AdapterCache& cache,
                        AdapterTrainables& grads);

inline constexpr std::size_t kAdapterPositions = 6;

/// Adapter widths before FC1..FC5 and after FC5 for a head on N-dimensional features.
std::array<int, kAdapterPositions> adapter_dims(int feature_dim);

/// Domain-specific module set: six adapters at the positions of adapter_dims().
struct DomainModuleSet {
  std::vector<AdapterModule> modules;

  static DomainModuleSet identity(std::span<const int> dims);
};

/// Trainable entries only (gamma, bn_gain, bn_bias): 3 · Σ dims.
std::size_t adapter_param_count(const DomainModuleSet& set);

}  // namespace countadapt
