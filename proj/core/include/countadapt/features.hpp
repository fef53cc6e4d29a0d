// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "countadapt/common.hpp"
#include "countadapt/datagen.hpp"
#include "countadapt/image.hpp"

namespace countadapt {

using FeatureVector = std::vector<double>;

struct ConvLayerSpec {
  int kernel = 5;
  int stride = 2;
  int channels = 8;
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

enum class Nonlinearity { rectifier, identity };

/// Frozen convolutional extractor: valid convolutions, optional rectifier after each layer,
/// global average pooling of the final maps. Output dimension N = last layer's channel count.
struct FrozenExtractorSpec {
  int input_channels = 1;
  std::vector<ConvLayerSpec> layers;
  Nonlinearity nonlinearity = Nonlinearity::rectifier;
  std::uint64_t seed = 0;

  int output_dim() const { return layers.empty() ? 0 : layers.back().channels; }
  void validate() const;

  /// 3 layers of 5×5 stride-2 convolutions, 8 -> 16 -> N channels.
  static FrozenExtractorSpec desk_default(int feature_dim = 64, std::uint64_t seed = 0,
                                          int input_channels = 1);

  /// Compact text form, e.g. "5x5s2:8,5x5s2:16,5x5s2:64". Used in archive manifests.
  std::string layers_string() const;
  static std::vector<ConvLayerSpec> parse_layers(const std::string& text);

  friend bool operator==(const FrozenExtractorSpec&, const FrozenExtractorSpec&) = default;
};

class FrozenExtractor {
 public:
  explicit FrozenExtractor(FrozenExtractorSpec spec);

  const FrozenExtractorSpec& spec() const { return spec_; }
  int output_dim() const { return spec_.output_dim(); }

  /// Smallest square patch side for which every layer still produces at least one position.
  int footprint() const;

  FeatureVector extract(const Image& patch) const;

  /// Final-layer maps before pooling: channels × (positions), row-major positions.
  Matrix feature_maps(const Image& patch) const;

  /// Kernel matrix of layer i: out_channels × (in_channels · k · k), in (in, ky, kx) order.
  const Matrix& weights(std::size_t layer) const { return weights_.at(layer); }
  const Vector& bias(std::size_t layer) const { return biases_.at(layer); }

 private:
  FrozenExtractorSpec spec_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

FrozenExtractor build_frozen_extractor(const FrozenExtractorSpec& spec);

/// Per-scene patch features laid out in the tiling's row-major grid order.
struct SceneFeatures {
  std::string scene_id;
  GridShape grid;
  Matrix features;              // grid.size() × N
  std::vector<double> gt_grid;  // per-patch dot counts
  double gt_total = 0.0;
};

SceneFeatures extract_scene_features(const FrozenExtractor& extractor, const Scene& scene,
                                     int patch_size);

/// Extracts every scene, fanned out over inference_threads(); output order = input order.
std::vector<SceneFeatures> extract_dataset_features(const FrozenExtractor& extractor,
                                                    std::span<const Scene> scenes, int patch_size);

/// Patch-level regression samples: one feature row and one target per patch.
struct PatchDataset {
  Matrix features;
  std::vector<double> targets;
  std::size_t size() const { return targets.size(); }
};

PatchDataset to_patch_dataset(std::span<const SceneFeatures> scenes);

/// Sidecar row mapping a feature row to its origin.
struct FeatureRecord {
  std::string scene_id;
  int grid_row = 0;
  int grid_col = 0;
  double gt_count = 0.0;
  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureFile {
  Matrix features;
  std::vector<FeatureRecord> records;  // empty when no sidecar exists
};

/// Little-endian "FTV1", u32 count, u32 N, then count×N float32 row-major.
/// Records (if any) go to `<path>.csv` with header "row,scene_id,grid_row,grid_col,gt_count".
void save_features(const std::filesystem::path& path, const Matrix& features,
                   std::span<const FeatureRecord> records = {});

FeatureFile load_precomputed(const std::filesystem::path& path,
                             std::optional<int> expected_dim = std::nullopt);

std::filesystem::path feature_sidecar_path(const std::filesystem::path& path);

/// Flattens scenes into one row per patch with matching sidecar records.
FeatureFile to_feature_file(std::span<const SceneFeatures> scenes);

/// Regroups rows by scene id (first-appearance order). Grid shapes come from the largest
/// row/column index seen; every cell of each grid must be present exactly once.
std::vector<SceneFeatures> scenes_from_feature_file(const FeatureFile& file);

}  // namespace countadapt
