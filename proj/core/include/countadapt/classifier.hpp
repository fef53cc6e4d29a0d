// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "countadapt/adapters.hpp"
#include "countadapt/features.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt {

/// K-way domain classifier built on a frozen counting core: FC1..FC4 are the core's, the
/// final layer is replaced by a 64 × K layer with softmax, and a fresh adapter set sits before
/// each of the five layers (no adapter after the final layer).
struct DomainClassifierHead {
  std::vector<std::string> domains;  // class j ↔ domains[j]
  std::vector<AdapterModule> adapters;
  DenseLayer final_layer;

  int num_classes() const { return static_cast<int>(domains.size()); }
  std::size_t trainable_param_count() const;
};

/// Fresh head: identity adapters, Glorot final layer, zero bias. K >= 2.
DomainClassifierHead make_classifier_head(const CountingModel& model, std::vector<std::string> domains,
                                          std::uint64_t seed);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits);

/// −(1/B) Σ_i Σ_j onehot_ij · log(max(probs_ij, 1e-12)).
double cce_loss(const Matrix& probs, const Matrix& onehot);

/// Pre-softmax scores; train mode uses batch statistics without updating running stats.
Matrix classifier_logits(const CountingModel& model, const DomainClassifierHead& head,
                         const Matrix& features, Mode mode = Mode::infer);

/// Probabilities for each feature row (batch × K).
Matrix classify_patches(const CountingModel& model, const DomainClassifierHead& head, const Matrix& features);

std::vector<double> classify_patch(const CountingModel& model, const DomainClassifierHead& head,
                                   const FeatureVector& features);

struct SceneClassification {
  std::string domain;
  std::vector<double> vote_shares;  // fraction of patches voting for each class
  std::vector<double> mean_probs;   // mean probability per class over patches
};

/// Majority vote over patches; ties go to the highest mean probability, then the lower index.
SceneClassification classify_scene(const CountingModel& model, const DomainClassifierHead& head,
                                   const SceneFeatures& scene);

enum class SceneClassifyMode { patch_vote, single_patch };

/// patch_vote tiles the scene; single_patch resizes the whole image to one patch.
SceneClassification classify_scene(const CountingModel& model, const DomainClassifierHead& head,
                                   const FrozenExtractor& extractor, const Scene& scene, int patch_size,
                                   SceneClassifyMode mode = SceneClassifyMode::patch_vote);

/// Feature rows per class, index-aligned with the head's domain list.
struct ClassifierDataset {
  std::vector<std::string> domains;
  std::vector<Matrix> features;
};

/// Groups scene patch features by scene domain (class order = first appearance order given).
ClassifierDataset make_classifier_dataset(std::span<const std::string> domains,
                                          std::span<const std::vector<SceneFeatures>> per_domain);

/// Trains a fresh head on a frozen core: only the new adapters and the K-neuron layer move.
/// Every mini-batch holds an equal number of patches from each class.
DomainClassifierHead train_classifier(const CountingModel& model, const ClassifierDataset& data,
                                      const TrainConfig& config, TrainLog* log = nullptr);

}  // namespace countadapt
