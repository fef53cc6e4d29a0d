// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "countadapt/adapters.hpp"
#include "countadapt/datagen.hpp"
#include "countadapt/features.hpp"
#include "countadapt/optim.hpp"
#include "countadapt/refiner.hpp"

namespace countadapt {

/// y = x · weight + bias, weight stored in × out.
struct DenseLayer {
  Matrix weight;
  Vector bias;
};

inline constexpr std::array<int, 5> kHeadWidths = {256, 128, 64, 64, 1};

/// Everything one counting domain owns: its adapter set, an optional refiner, and optimizer
/// state for resuming either.
struct DomainEntry {
  DomainModuleSet adapters;
  std::vector<AdapterTrainables> adagrad;  // empty when no optimizer state is kept
  std::uint64_t steps_done = 0;
  std::optional<RefinementNet> refiner;
  std::optional<RefinerTrainingState> refiner_state;
};

/// Shared fully connected head (N -> 256 -> 128 -> 64 -> 64 -> 1) plus a registry of
/// per-domain adapter sets. Forward order for domain d with adapters A1..A6:
///   A1 FC1 ReLU A2 FC2 ReLU A3 FC3 ReLU A4 FC4 ReLU A5 FC5 ReLU A6
class CountingModel {
 public:
  /// Glorot-uniform weights, zero biases, no domains.
  CountingModel(int feature_dim, std::uint64_t seed);

  int feature_dim() const { return feature_dim_; }
  bool shared_frozen() const { return frozen_; }
  void freeze_shared() { frozen_ = true; }

  const std::array<DenseLayer, 5>& shared() const { return shared_; }
  /// Mutable access for training, loading and tests. Throws once the core is frozen.
  std::array<DenseLayer, 5>& mutable_shared();

  bool has_domain(std::string_view name) const;
  const DomainEntry& domain(std::string_view name) const;
  DomainEntry& domain(std::string_view name);
  std::vector<std::string> domain_names() const;

  /// Registers an identity-initialized adapter set. Throws domain_exists if present.
  DomainEntry& register_domain(const std::string& name);
  /// Inserts or replaces; checks the adapter widths against this core.
  void set_domain(const std::string& name, DomainEntry entry);
  void remove_domain(std::string_view name);

  /// Forward for one domain. Train mode uses batch statistics but never updates running
  /// statistics; returns batch × 1 estimates.
  Matrix forward(const Matrix& features, std::string_view domain, Mode mode = Mode::infer) const;

  /// Weights plus biases of the five shared layers.
  std::size_t shared_param_count() const;

  void check_adapter_set(const DomainModuleSet& set) const;

 private:
  CountingModel() = default;
  friend CountingModel zero_counting_model(int feature_dim);

  int feature_dim_ = 0;
  bool frozen_ = false;
  std::array<DenseLayer, 5> shared_;
  std::map<std::string, DomainEntry, std::less<>> domains_;
};

/// All-zero weights and biases.
CountingModel zero_counting_model(int feature_dim);

/// (1/2B) Σ (pred − target)².
double loss_l2(const Matrix& preds, std::span<const double> targets);

/// Trains the shared layers and the priming domain's adapters jointly, then freezes the core.
/// Throws if the core is already frozen or the domain exists.
TrainLog prime(CountingModel& model, const PatchDataset& data, const std::string& domain,
               const TrainConfig& config);

struct AdaptOptions {
  /// Replace an existing domain's adapters with a fresh set instead of failing.
  bool retrain = false;
  /// Continue training an existing domain from its stored AdaGrad state.
  bool resume = false;
};

/// Registers a fresh identity adapter set for `domain` and trains only that set against the
/// frozen core. Other domains and the shared layers are not touched.
TrainLog adapt(CountingModel& model, const PatchDataset& data, const std::string& domain,
               const TrainConfig& config, AdaptOptions options = {});

struct Prediction {
  EstimateGrid grid;    // unclamped per-patch estimates
  double raw_total = 0; // Σ grid, row-major
  double total = 0;     // max(raw_total, 0)
};

Prediction predict_grid(const CountingModel& model, const SceneFeatures& scene, std::string_view domain);

Prediction predict_image(const CountingModel& model, const FrozenExtractor& extractor,
                         const Scene& scene, std::string_view domain, int patch_size);

Prediction predict_image(const CountingModel& model, const FrozenExtractor& extractor,
                         const Image& image, std::string_view domain, int patch_size);

}  // namespace countadapt
