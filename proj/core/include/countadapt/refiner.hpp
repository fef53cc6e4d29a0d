// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "countadapt/datagen.hpp"
#include "countadapt/features.hpp"
#include "countadapt/optim.hpp"

namespace countadapt {

/// H×W per-patch count estimates for one image, row-major.
struct EstimateGrid {
  GridShape shape;
  std::vector<double> values;
  std::string scene_id;

  double at(int row, int col) const { return values[static_cast<std::size_t>(row) * shape.cols + col]; }
  /// Row-major left-to-right sum.
  double sum() const;
};

/// 3×3 same-padded convolution. Weights laid out [out][in][ky][kx].
struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  std::size_t weight_index(int out, int in, int ky, int kx) const {
    return ((static_cast<std::size_t>(out) * in_channels + in) * 3 + ky) * 3 + kx;
  }
};

/// Fully convolutional refiner: 3×3 kernels with zero same-padding and a rectifier after every
/// layer (the output is nonnegative). Default channels 1 -> 16 -> 16 -> 16 -> 1.
struct RefinementNet {
  std::vector<ConvLayer> layers;

  /// channels includes the input width, e.g. {1, 16, 16, 16, 1}. Glorot-uniform kernels,
  /// zero biases. An empty or single-entry list yields a layerless net.
  static RefinementNet create(std::span<const int> channels, std::uint64_t seed);
  static RefinementNet create_default(std::uint64_t seed);
  /// Same shape as `like`, every entry zero. Used for gradient and accumulator buffers.
  static RefinementNet zeros_like(const RefinementNet& like);
};

inline constexpr int kRefinerChannels[] = {1, 16, 16, 16, 1};

/// Default refiner learning rate. At the regressor's 0.1 the first AdaGrad steps move all
/// kernels by about the full rate at once, the output overshoots by orders of magnitude and
/// the corrective step can leave the final rectifier inactive on every input.
inline constexpr double kRefinerLearningRate = 0.01;

/// Σ over layers of 3·3·C_in·C_out + C_out.
std::size_t refiner_param_count(const RefinementNet& net);

/// Output grid has the input's shape. A layerless net returns the input unchanged.
EstimateGrid refine(const RefinementNet& net, const EstimateGrid& grid);

/// Every layer's pre-rectifier values, concatenated in layer order (for diagnostics).
std::vector<double> refiner_pre_activations(const RefinementNet& net, const EstimateGrid& grid);

struct RefinementPair {
  EstimateGrid estimate;
  EstimateGrid truth;
};

/// Optimizer state that survives between training sessions (serialized with the domain).
struct RefinerTrainingState {
  RefinementNet accum;
  std::uint64_t steps_done = 0;
};

/// Minimizes (1/2B) Σ_b ‖refine(est_b) − truth_b‖² with AdaGrad (decay on kernels only).
/// Pairs are bucketed by grid shape and each step draws a batch from one bucket, cycling
/// through buckets in shape order.
TrainLog train_refiner(RefinementNet& net, std::span<const RefinementPair> pairs,
                       const TrainConfig& config, RefinerTrainingState* state = nullptr);

/// Loss of the objective above over one batch, and its gradient (accumulated into grads).
double refiner_loss_and_grad(const RefinementNet& net, std::span<const RefinementPair> batch,
                             RefinementNet* grads);

class CountingModel;

/// One pair per scene: the base model's unclamped estimate grid and the ground-truth count grid.
std::vector<RefinementPair> build_refinement_pairs(const CountingModel& model,
                                                   std::span<const SceneFeatures> scenes,
                                                   std::string_view domain);

std::vector<RefinementPair> build_refinement_pairs(const CountingModel& model,
                                                   const FrozenExtractor& extractor,
                                                   std::span<const Scene> scenes,
                                                   std::string_view domain, int patch_size);

}  // namespace countadapt
