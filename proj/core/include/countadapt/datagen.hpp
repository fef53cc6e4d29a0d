// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "countadapt/image.hpp"

namespace countadapt {

/// One annotated object. Pixel coordinates, origin top-left, 0 <= x < width, 0 <= y < height.
struct DotAnnotation {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const DotAnnotation&, const DotAnnotation&) = default;
};

struct Scene {
  std::string id;
  std::string domain;
  Image pixels;
  std::vector<DotAnnotation> dots;

  double count() const { return static_cast<double>(dots.size()); }
};

enum class BlobShape { gaussian_spot, ring, rectangle, crescent };
enum class Background { flat, gradient, textured_noise };

/// Truncated normal over integer counts.
struct CountDistribution {
  double mean = 0.0;
  double stddev = 0.0;
  int min = 0;
  int max = 0;
};

struct SyntheticDomainSpec {
  std::string name;
  BlobShape shape = BlobShape::gaussian_spot;
  double radius_min = 3.0;
  double radius_max = 5.0;
  double intensity_min = 0.6;
  double intensity_max = 0.9;
  Background background = Background::flat;
  double background_level = 0.2;
  double noise_sigma = 0.02;
  CountDistribution counts;

  /// Throws invalid_argument when the invariants do not hold.
  void validate() const;
};

/// crowd-like, vehicle-like, wildlife-like, cell-like (in that order).
const std::vector<SyntheticDomainSpec>& builtin_domains();
const SyntheticDomainSpec& builtin_domain(std::string_view name);

std::string_view to_string(BlobShape shape);
std::string_view to_string(Background background);

/// Renders one scene. Blob centers sit on integer pixel positions and each becomes one dot.
/// Deterministic in (spec, size, seed, channels).
Scene gen_scene(const SyntheticDomainSpec& spec, int height, int width, std::uint64_t seed,
                int channels = 1);

/// Draws a count from the spec's truncated normal (rounded, rejection-sampled into [min, max]).
int sample_count(const CountDistribution& dist, std::uint64_t seed);

struct PatchRect {
  double x0 = 0.0;
  double y0 = 0.0;
  int size = 1;
};

/// Number of dots with x0 <= x < x0 + P and y0 <= y < y0 + P.
double patch_gt_count(std::span<const DotAnnotation> dots, PatchRect rect);

struct PatchSample {
  Image patch;
  double gt_count = 0.0;
  std::string scene_id;
  int row = 0;
  int col = 0;
};

struct GridShape {
  int rows = 0;
  int cols = 0;
  int size() const { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Tiling grid for an image: ceil(H/P) × ceil(W/P).
GridShape grid_shape(int height, int width, int patch_size);

/// Non-overlapping row-major tiling. The image is zero-padded on the right and bottom to the
/// next multiple of the patch size, so partial patches are kept and every dot lands in one patch.
std::vector<PatchSample> tile_patches(const Scene& scene, int patch_size);

/// Per-patch ground-truth counts in the same row-major layout as tile_patches.
std::vector<double> gt_count_grid(const Scene& scene, int patch_size);

/// x -> width - 1 - x, pixels mirrored column-wise. Coordinates that would leave
/// [0, width) (x > width - 1) are clamped to 0.
Scene hflip(const Scene& scene);

/// Original scenes followed by their mirrors (ids suffixed "_flip").
std::vector<Scene> augment_hflip(std::span<const Scene> dataset);

/// Seeded shuffle, then the first round(fraction * n) shuffled scenes form the validation set.
std::pair<std::vector<Scene>, std::vector<Scene>> split_train_val(std::span<const Scene> dataset,
                                                                  double fraction,
                                                                  std::uint64_t seed);

/// On-disk dataset layout:
///   manifest.csv          header "id,domain,split"
///   scenes/<id>.pgm|.ppm|.png
///   annotations/<id>.csv  header "x,y", one row per dot
struct DatasetEntry {
  Scene scene;
  std::string split;
};

std::vector<DatasetEntry> load_dot_dataset(const std::filesystem::path& directory);

/// Convenience filter over load_dot_dataset. An empty split selects everything.
std::vector<Scene> load_dot_dataset(const std::filesystem::path& directory, std::string_view split);

void write_dot_dataset(const std::filesystem::path& directory, std::span<const DatasetEntry> entries);

/// Generates `count` scenes of one synthetic domain with a seeded train/val split.
std::vector<DatasetEntry> gen_dataset(const SyntheticDomainSpec& spec, int count, int height,
                                      int width, std::uint64_t seed, double val_fraction = 0.3,
                                      int channels = 1);

}  // namespace countadapt
