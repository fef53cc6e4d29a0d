// SPDX-License-Identifier: Apache-2.0
#include "countadapt/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "countadapt/common.hpp"
#include "csv.hpp"

namespace countadapt {
namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Bounding half-extent of a blob around its center, in pixels.
double blob_extent(BlobShape shape, double radius) {
  switch (shape) {
    case BlobShape::gaussian_spot: return 2.0 * radius;
    case BlobShape::ring: return 1.6 * radius;
    default: return radius + 1.0;
  }
}

struct Blob {
  int cx = 0;
  int cy = 0;
  double radius = 0.0;
  double intensity = 0.0;
  double angle = 0.0;
  bool vertical = false;
};

double blob_value(BlobShape shape, const Blob& b, double dx, double dy) {
  const double d = std::hypot(dx, dy);
  const double r = b.radius;
  switch (shape) {
    case BlobShape::gaussian_spot: {
      const double s = 0.5 * r;
      return b.intensity * std::exp(-d * d / (2.0 * s * s));
    }
    case BlobShape::ring: {
      const double s = 0.18 * r;
      const double t = d - 0.75 * r;
      return b.intensity * std::exp(-t * t / (2.0 * s * s));
    }
    case BlobShape::rectangle: {
      const double hx = b.vertical ? 0.55 * r : r;
      const double hy = b.vertical ? r : 0.55 * r;
      return (std::abs(dx) <= hx && std::abs(dy) <= hy) ? b.intensity : 0.0;
    }
    case BlobShape::crescent: {
      const double ox = 0.45 * r * std::cos(b.angle);
      const double oy = 0.45 * r * std::sin(b.angle);
      const bool inside = d <= r;
      const bool bitten = std::hypot(dx - ox, dy - oy) <= 0.8 * r;
      return (inside && !bitten) ? b.intensity : 0.0;
    }
  }
  return 0.0;
}

constexpr double kTint[3] = {1.0, 0.85, 0.7};

void render_background(const SyntheticDomainSpec& spec, Image& img, Rng& rng) {
  const int h = img.height, w = img.width;
  switch (spec.background) {
    case Background::flat:
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          for (int ch = 0; ch < img.channels; ++ch) img.at(r, c, ch) = spec.background_level;
      break;
    case Background::gradient: {
      const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const double ux = std::cos(theta), uy = std::sin(theta);
      const double span = std::abs(ux) * w + std::abs(uy) * h;
      const double origin = std::min(0.0, ux * w) + std::min(0.0, uy * h);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double t = (ux * c + uy * r - origin) / span;
          for (int ch = 0; ch < img.channels; ++ch)
            img.at(r, c, ch) = spec.background_level + 0.25 * t;
        }
      break;
    }
    case Background::textured_noise: {
      struct Wave { double fx, fy, phase, amp; };
      std::vector<Wave> waves;
      for (int k = 1; k <= 4; ++k) {
        const double freq = 0.04 * k;
        const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        waves.push_back({freq * std::cos(theta), freq * std::sin(theta),
                         uniform(rng, 0.0, 2.0 * std::numbers::pi), 0.05 / k});
      }
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          double v = spec.background_level;
          for (const auto& wv : waves) v += wv.amp * std::sin(wv.fx * c + wv.fy * r + wv.phase);
          for (int ch = 0; ch < img.channels; ++ch) img.at(r, c, ch) = v;
        }
      break;
    }
  }
}

}  // namespace

void SyntheticDomainSpec::validate() const {
  auto fail = [&](const std::string& why) {
    throw Error(ErrorCode::invalid_argument, "domain spec '" + name + "': " + why);
  };
  if (!is_valid_domain_id(name)) fail("name must match [A-Za-z0-9_.-]+");
  if (!(radius_min > 0.0) || !(radius_max >= radius_min)) fail("radius range must be positive");
  if (!(intensity_max >= intensity_min)) fail("intensity range is inverted");
  if (!(noise_sigma >= 0.0)) fail("noise sigma must be nonnegative");
  if (counts.min < 0) fail("count min must be >= 0");
  if (counts.max < counts.min) fail("count max must be >= min");
  if (!(counts.stddev >= 0.0)) fail("count stddev must be nonnegative");
}

const std::vector<SyntheticDomainSpec>& builtin_domains() {
  // Count statistics are the four real-domain tables scaled to desk size (cap 80 per scene).
  static const std::vector<SyntheticDomainSpec> specs = {
      {"crowd-like", BlobShape::gaussian_spot, 2.5, 4.0, 0.45, 0.8, Background::textured_noise,
       0.25, 0.03, {50.0, 45.5, 3, 80}},
      {"vehicle-like", BlobShape::rectangle, 4.0, 6.0, 0.5, 0.8, Background::gradient, 0.15,
       0.02, {36.0, 14.9, 9, 80}},
      {"wildlife-like", BlobShape::crescent, 5.0, 8.0, 0.55, 0.85, Background::flat, 0.35,
       0.05, {7.0, 5.7, 0, 67}},
      {"cell-like", BlobShape::ring, 4.0, 7.0, 0.5, 0.85, Background::flat, 0.2, 0.03,
       {34.1, 21.8, 0, 80}},
  };
  return specs;
}

const SyntheticDomainSpec& builtin_domain(std::string_view name) {
  for (const auto& s : builtin_domains())
    if (s.name == name) return s;
  throw Error(ErrorCode::invalid_argument, "unknown synthetic domain '" + std::string(name) + "'");
}

std::string_view to_string(BlobShape shape) {
  switch (shape) {
    case BlobShape::gaussian_spot: return "gaussian-spot";
    case BlobShape::ring: return "ring";
    case BlobShape::rectangle: return "rectangle";
    case BlobShape::crescent: return "crescent";
  }
  return "?";
}

std::string_view to_string(Background background) {
  switch (background) {
    case Background::flat: return "flat";
    case Background::gradient: return "gradient";
    case Background::textured_noise: return "textured-noise";
  }
  return "?";
}

int sample_count(const CountDistribution& dist, std::uint64_t seed) {
  if (dist.stddev == 0.0) {
    return std::clamp(static_cast<int>(std::lround(dist.mean)), dist.min, dist.max);
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(dist.mean, dist.stddev);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const long v = std::lround(normal(rng));
    if (v >= dist.min && v <= dist.max) return static_cast<int>(v);
  }
  // Only reachable when the window sits far in a tail.
  return std::clamp(static_cast<int>(std::lround(dist.mean)), dist.min, dist.max);
}

Scene gen_scene(const SyntheticDomainSpec& spec, int height, int width, std::uint64_t seed,
                int channels) {
  spec.validate();
  if (channels != 1 && channels != 3) {
    throw Error(ErrorCode::invalid_argument, "channels must be 1 or 3");
  }
  const double diameter = 2.0 * spec.radius_max;
  if (height < diameter || width < diameter) {
    throw Error(ErrorCode::invalid_argument, "image smaller than blob diameter");
  }
  const double blob_area = std::numbers::pi * spec.radius_max * spec.radius_max;
  if (spec.counts.max * blob_area > static_cast<double>(height) * width) {
    throw Error(ErrorCode::infeasible_density,
                "spec '" + spec.name + "' cannot fit " + std::to_string(spec.counts.max) +
                    " blobs in " + std::to_string(height) + "x" + std::to_string(width));
  }

  Scene scene;
  scene.domain = spec.name;
  scene.pixels = Image(height, width, channels);
  Rng rng(derive_seed(seed, spec.name + "/render"));
  render_background(spec, scene.pixels, rng);

  const int n = sample_count(spec.counts, derive_seed(seed, spec.name + "/count"));
  std::uniform_int_distribution<int> col_dist(0, width - 1), row_dist(0, height - 1);
  std::vector<Blob> blobs(n);
  for (auto& b : blobs) {
    b.cx = col_dist(rng);
    b.cy = row_dist(rng);
    b.radius = uniform(rng, spec.radius_min, spec.radius_max);
    b.intensity = uniform(rng, spec.intensity_min, spec.intensity_max);
    b.angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    b.vertical = std::bernoulli_distribution(0.5)(rng);
  }

  Image& img = scene.pixels;
  for (const auto& b : blobs) {
    const double ext = blob_extent(spec.shape, b.radius);
    const int r0 = std::max(0, static_cast<int>(std::floor(b.cy - ext)));
    const int r1 = std::min(height - 1, static_cast<int>(std::ceil(b.cy + ext)));
    const int c0 = std::max(0, static_cast<int>(std::floor(b.cx - ext)));
    const int c1 = std::min(width - 1, static_cast<int>(std::ceil(b.cx + ext)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const double v = blob_value(spec.shape, b, c - b.cx, r - b.cy);
        if (v == 0.0) continue;
        for (int ch = 0; ch < channels; ++ch) img.at(r, c, ch) += v * kTint[ch];
      }
    scene.dots.push_back({static_cast<double>(b.cx), static_cast<double>(b.cy)});
  }

  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (double& v : img.data) v += noise(rng);
  }
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return scene;
}

double patch_gt_count(std::span<const DotAnnotation> dots, PatchRect rect) {
  if (rect.size < 1) throw Error(ErrorCode::invalid_argument, "patch size must be >= 1");
  const double x1 = rect.x0 + rect.size;
  const double y1 = rect.y0 + rect.size;
  std::size_t n = 0;
  for (const auto& d : dots) {
    if (d.x >= rect.x0 && d.x < x1 && d.y >= rect.y0 && d.y < y1) ++n;
  }
  return static_cast<double>(n);
}

GridShape grid_shape(int height, int width, int patch_size) {
  if (patch_size < 1) throw Error(ErrorCode::invalid_argument, "patch size must be >= 1");
  if (height < 1 || width < 1) throw Error(ErrorCode::invalid_argument, "empty image");
  return {(height + patch_size - 1) / patch_size, (width + patch_size - 1) / patch_size};
}

std::vector<PatchSample> tile_patches(const Scene& scene, int patch_size) {
  const Image& img = scene.pixels;
  const GridShape grid = grid_shape(img.height, img.width, patch_size);
  std::vector<PatchSample> out;
  out.reserve(grid.size());
  for (int gr = 0; gr < grid.rows; ++gr) {
    for (int gc = 0; gc < grid.cols; ++gc) {
      PatchSample s;
      s.patch = Image(patch_size, patch_size, img.channels);
      const int y0 = gr * patch_size, x0 = gc * patch_size;
      const int rows = std::min(patch_size, img.height - y0);
      const int cols = std::min(patch_size, img.width - x0);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          for (int ch = 0; ch < img.channels; ++ch) s.patch.at(r, c, ch) = img.at(y0 + r, x0 + c, ch);
      s.gt_count = patch_gt_count(scene.dots, {static_cast<double>(x0), static_cast<double>(y0), patch_size});
      s.scene_id = scene.id;
      s.row = gr;
      s.col = gc;
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<double> gt_count_grid(const Scene& scene, int patch_size) {
  const GridShape grid = grid_shape(scene.pixels.height, scene.pixels.width, patch_size);
  std::vector<double> out;
  out.reserve(grid.size());
  for (int gr = 0; gr < grid.rows; ++gr)
    for (int gc = 0; gc < grid.cols; ++gc)
      out.push_back(patch_gt_count(
          scene.dots, {static_cast<double>(gc * patch_size), static_cast<double>(gr * patch_size), patch_size}));
  return out;
}

Scene hflip(const Scene& scene) {
  Scene out = scene;
  const Image& src = scene.pixels;
  for (int r = 0; r < src.height; ++r)
    for (int c = 0; c < src.width; ++c)
      for (int ch = 0; ch < src.channels; ++ch)
        out.pixels.at(r, src.width - 1 - c, ch) = src.at(r, c, ch);
  const double last = src.width - 1.0;
  for (auto& d : out.dots) d.x = std::max(0.0, last - d.x);
  return out;
}

std::vector<Scene> augment_hflip(std::span<const Scene> dataset) {
  std::vector<Scene> out(dataset.begin(), dataset.end());
  out.reserve(2 * dataset.size());
  for (const auto& s : dataset) {
    Scene f = hflip(s);
    f.id = s.id + "_flip";
    out.push_back(std::move(f));
  }
  return out;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

std::size_t val_size(std::size_t n, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "split fraction must be in [0, 1]");
  }
  return static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
}

}  // namespace

std::pair<std::vector<Scene>, std::vector<Scene>> split_train_val(std::span<const Scene> dataset,
                                                                  double fraction,
                                                                  std::uint64_t seed) {
  const std::size_t nval = val_size(dataset.size(), fraction);
  const auto idx = shuffled_indices(dataset.size(), seed);
  std::pair<std::vector<Scene>, std::vector<Scene>> out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    (i < nval ? out.second : out.first).push_back(dataset[idx[i]]);
  }
  return out;
}

std::vector<DatasetEntry> gen_dataset(const SyntheticDomainSpec& spec, int count, int height,
                                      int width, std::uint64_t seed, double val_fraction,
                                      int channels) {
  if (count < 0) throw Error(ErrorCode::invalid_argument, "scene count must be >= 0");
  const std::size_t nval = val_size(static_cast<std::size_t>(count), val_fraction);
  std::vector<DatasetEntry> out(static_cast<std::size_t>(count));
  parallel_for(out.size(), [&](std::size_t i) {
    char id[32];
    std::snprintf(id, sizeof id, "%05zu", i);
    out[i].scene = gen_scene(spec, height, width, derive_seed(seed, id), channels);
    out[i].scene.id = spec.name + "_" + id;
    out[i].split = "train";
  });
  const auto idx = shuffled_indices(out.size(), derive_seed(seed, "split"));
  for (std::size_t i = 0; i < nval; ++i) out[idx[i]].split = "val";
  return out;
}

std::vector<DatasetEntry> load_dot_dataset(const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  const auto manifest = csv::read(directory / "manifest.csv", {"id", "domain", "split"});
  std::vector<DatasetEntry> out;
  out.reserve(manifest.size());
  for (const auto& row : manifest) {
    DatasetEntry e;
    e.scene.id = row[0];
    e.scene.domain = row[1];
    e.split = row[2];
    fs::path image_path;
    for (const char* ext : {".pgm", ".ppm", ".png"}) {
      fs::path p = directory / "scenes" / (row[0] + ext);
      if (fs::exists(p)) {
        image_path = p;
        break;
      }
    }
    if (image_path.empty()) {
      throw Error(ErrorCode::io_error, "missing image for scene '" + row[0] + "'");
    }
    e.scene.pixels = read_image(image_path);
    const fs::path ann = directory / "annotations" / (row[0] + ".csv");
    if (!fs::exists(ann)) {
      throw Error(ErrorCode::io_error, "missing annotation file " + ann.string());
    }
    for (const auto& dot : csv::read(ann, {"x", "y"})) {
      DotAnnotation d{csv::to_double(dot[0]), csv::to_double(dot[1])};
      if (!(d.x >= 0.0 && d.x < e.scene.pixels.width && d.y >= 0.0 && d.y < e.scene.pixels.height)) {
        throw Error(ErrorCode::format_error, ann.string() + ": dot (" + dot[0] + "," + dot[1] +
                                                 ") outside the " +
                                                 std::to_string(e.scene.pixels.width) + "x" +
                                                 std::to_string(e.scene.pixels.height) + " image");
      }
      e.scene.dots.push_back(d);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Scene> load_dot_dataset(const std::filesystem::path& directory, std::string_view split) {
  std::vector<Scene> out;
  for (auto& e : load_dot_dataset(directory)) {
    if (split.empty() || e.split == split) out.push_back(std::move(e.scene));
  }
  return out;
}

void write_dot_dataset(const std::filesystem::path& directory, std::span<const DatasetEntry> entries) {
  namespace fs = std::filesystem;
  fs::create_directories(directory / "scenes");
  fs::create_directories(directory / "annotations");
  std::ofstream manifest(directory / "manifest.csv");
  if (!manifest) throw Error(ErrorCode::io_error, "cannot write manifest in " + directory.string());
  manifest << "id,domain,split\n";
  for (const auto& e : entries) {
    const Scene& s = e.scene;
    manifest << s.id << ',' << s.domain << ',' << e.split << '\n';
    write_pnm(s.pixels, directory / "scenes" / (s.id + (s.pixels.channels == 1 ? ".pgm" : ".ppm")));
    std::ofstream ann(directory / "annotations" / (s.id + ".csv"));
    if (!ann) throw Error(ErrorCode::io_error, "cannot write annotations for " + s.id);
    ann << "x,y\n";
    for (const auto& d : s.dots) ann << csv::format(d.x) << ',' << csv::format(d.y) << '\n';
  }
  if (!manifest) throw Error(ErrorCode::io_error, "short write to manifest");
}

}  // namespace countadapt
