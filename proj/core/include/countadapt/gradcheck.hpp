// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "countadapt/classifier.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt {

/// |a − n| / max(|a|, |n|, floor). The floor keeps entries whose true gradient is zero from
/// turning finite-difference round-off into a huge ratio.
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradCheckResult {
  std::string component;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbations that flipped a rectifier
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckOptions {
  double step = 1e-5;                // central difference half-width
  bool five_point = true;            // fourth-order central stencil; false = two-point
  double floor = 1e-6;               // see relative_error
  std::size_t max_per_tensor = 256;  // entries sampled per parameter tensor
  int head_batch = 4;                // batch of the counting-head check (N = 8)
};

/// Shared weights, biases and every adapter trainable of one domain, under the squared loss in
/// train mode (batch statistics, running statistics untouched).
GradCheckResult check_counting_gradients(const CountingModel& model, std::string_view domain,
                                         const Matrix& features, std::span<const double> targets,
                                         std::uint64_t seed, const GradCheckOptions& opt = {});

/// gamma, bn_gain, bn_bias and the input of one adapter under a random linear probe.
GradCheckResult check_adapter_gradients(std::uint64_t seed, Mode mode, const GradCheckOptions& opt = {});

/// Every refiner kernel and bias on small grids.
GradCheckResult check_refiner_gradients(std::uint64_t seed, const GradCheckOptions& opt = {});

/// d CCE(softmax(z)) / dz against finite differences of the logits.
GradCheckResult check_softmax_cce_gradients(std::uint64_t seed, const GradCheckOptions& opt = {});

/// Classifier adapters and final layer through the frozen core, CCE loss.
GradCheckResult check_classifier_gradients(std::uint64_t seed, const GradCheckOptions& opt = {});

/// All of the above on seeded small configurations (head on N = 8, batch opt.head_batch).
std::vector<GradCheckResult> run_grad_checks(std::uint64_t seed, const GradCheckOptions& opt = {});

}  // namespace countadapt
