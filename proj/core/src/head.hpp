// SPDX-License-Identifier: Apache-2.0
// Forward/backward through the five-layer fully connected stack with interleaved adapters.
// Shared by the counting head (six adapters, rectifier after every layer) and the
// classifier head (five adapters, no rectifier after the final layer).
#pragma once

#include <array>
#include <span>
#include <vector>

#include "countadapt/adapters.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt::detail {

struct HeadView {
  std::array<const DenseLayer*, 5> layers{};
  std::span<const AdapterModule> adapters;
  bool final_relu = true;
};

struct HeadTape {
  std::vector<AdapterCache> adapters;
  std::array<Matrix, 5> layer_in;
  std::array<Matrix, 5> pre_act;
};

struct HeadGrads {
  std::array<DenseLayer, 5> layers;
  std::vector<AdapterTrainables> adapters;
};

HeadView counting_view(const CountingModel& model, const DomainModuleSet& set);

Matrix head_forward(const HeadView& view, const Matrix& x, Mode mode, HeadTape* tape);

/// Zeroed gradient buffers. Layers with mask[k] == false get empty buffers.
HeadGrads zero_grads(const HeadView& view, const std::array<bool, 5>& layer_mask);

/// Accumulates into `grads`; only layers with a non-empty buffer receive weight gradients.
void head_backward(const HeadView& view, const HeadTape& tape, const Matrix& dout, HeadGrads& grads);

/// AdaGrad over one dense layer: decay on the weight matrix only.
void adagrad_dense(DenseLayer& param, const DenseLayer& grad, DenseLayer& accum, const TrainConfig& cfg);

/// AdaGrad over one adapter: decay on gamma only.
void adagrad_adapter(AdapterModule& param, const AdapterTrainables& grad, AdapterTrainables& accum,
                     const TrainConfig& cfg);

Matrix gather_rows(const Matrix& source, std::span<const std::size_t> rows);

}  // namespace countadapt::detail
