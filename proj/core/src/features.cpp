// SPDX-License-Identifier: Apache-2.0
#include "countadapt/features.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "binio.hpp"
#include "countadapt/init.hpp"
#include "csv.hpp"

namespace countadapt {
namespace {

constexpr std::string_view kFeatureMagic = "FTV1";

// Input stored channel-major: channels × (height · width).
struct Maps {
  int height = 0;
  int width = 0;
  Matrix values;
};

Maps to_maps(const Image& img) {
  Maps m{img.height, img.width, Matrix(img.channels, img.height * img.width)};
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch) m.values(ch, r * img.width + c) = img.at(r, c, ch);
  return m;
}

// Valid convolution via im2col and one GEMM.
Maps conv_valid(const Maps& in, const Matrix& kernel, const Vector& bias, const ConvLayerSpec& spec,
                bool rectify) {
  const int k = spec.kernel, s = spec.stride;
  const int in_ch = static_cast<int>(in.values.rows());
  const int oh = (in.height - k) / s + 1;
  const int ow = (in.width - k) / s + 1;
  Matrix cols(in_ch * k * k, oh * ow);
  for (int ch = 0; ch < in_ch; ++ch)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (ch * k + ky) * k + kx;
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x)
            cols(row, y * ow + x) = in.values(ch, (y * s + ky) * in.width + x * s + kx);
      }
  Maps out{oh, ow, kernel * cols};
  out.values.colwise() += bias;
  if (rectify) out.values = out.values.cwiseMax(0.0);
  return out;
}

}  // namespace

void FrozenExtractorSpec::validate() const {
  if (input_channels < 1) throw Error(ErrorCode::invalid_argument, "extractor needs >= 1 input channel");
  if (layers.empty()) throw Error(ErrorCode::invalid_argument, "extractor needs >= 1 layer");
  for (const auto& l : layers) {
    if (l.kernel < 1 || l.stride < 1 || l.channels < 1) {
      throw Error(ErrorCode::invalid_argument,
                  "extractor layers need positive kernel, stride and channel count (N > 0)");
    }
  }
}

FrozenExtractorSpec FrozenExtractorSpec::desk_default(int feature_dim, std::uint64_t seed,
                                                      int input_channels) {
  FrozenExtractorSpec s;
  s.input_channels = input_channels;
  s.layers = {{5, 2, 8}, {5, 2, 16}, {5, 2, feature_dim}};
  s.seed = seed;
  return s;
}

std::string FrozenExtractorSpec::layers_string() const {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += ',';
    out += std::to_string(l.kernel) + "x" + std::to_string(l.kernel) + "s" +
           std::to_string(l.stride) + ":" + std::to_string(l.channels);
  }
  return out;
}

std::vector<ConvLayerSpec> FrozenExtractorSpec::parse_layers(const std::string& text) {
  std::vector<ConvLayerSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int k1 = 0, k2 = 0, s = 0, c = 0;
    char tail = 0;
    if (std::sscanf(item.c_str(), "%dx%ds%d:%d%c", &k1, &k2, &s, &c, &tail) != 4 || k1 != k2) {
      throw Error(ErrorCode::format_error, "bad extractor layer '" + item + "' (want KxKsS:C)");
    }
    out.push_back({k1, s, c});
  }
  return out;
}

FrozenExtractor::FrozenExtractor(FrozenExtractorSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(derive_seed(spec_.seed, "extractor"));
  int in_ch = spec_.input_channels;
  for (const auto& l : spec_.layers) {
    const int area = l.kernel * l.kernel;
    Matrix w(l.channels, in_ch * area);
    glorot_uniform_fill({w.data(), static_cast<std::size_t>(w.size())}, in_ch * area,
                        l.channels * area, rng);
    weights_.push_back(std::move(w));
    biases_.push_back(Vector::Zero(l.channels));
    in_ch = l.channels;
  }
}

int FrozenExtractor::footprint() const {
  int need = 1;
  for (auto it = spec_.layers.rbegin(); it != spec_.layers.rend(); ++it) {
    need = (need - 1) * it->stride + it->kernel;
  }
  return need;
}

Matrix FrozenExtractor::feature_maps(const Image& patch) const {
  if (patch.channels != spec_.input_channels) {
    throw Error(ErrorCode::dimension_mismatch, "patch has " + std::to_string(patch.channels) +
                                                   " channels, extractor expects " +
                                                   std::to_string(spec_.input_channels));
  }
  const int fp = footprint();
  if (patch.height < fp || patch.width < fp) {
    throw Error(ErrorCode::invalid_argument, "patch smaller than extractor footprint " +
                                                 std::to_string(fp) + "x" + std::to_string(fp));
  }
  Maps m = to_maps(patch);
  const bool rectify = spec_.nonlinearity == Nonlinearity::rectifier;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    m = conv_valid(m, weights_[i], biases_[i], spec_.layers[i], rectify);
  }
  return std::move(m.values);
}

FeatureVector FrozenExtractor::extract(const Image& patch) const {
  const Matrix maps = feature_maps(patch);
  const Vector pooled = maps.rowwise().mean();
  return FeatureVector(pooled.data(), pooled.data() + pooled.size());
}

FrozenExtractor build_frozen_extractor(const FrozenExtractorSpec& spec) { return FrozenExtractor(spec); }

SceneFeatures extract_scene_features(const FrozenExtractor& extractor, const Scene& scene,
                                     int patch_size) {
  const auto patches = tile_patches(scene, patch_size);
  SceneFeatures out;
  out.scene_id = scene.id;
  out.grid = grid_shape(scene.pixels.height, scene.pixels.width, patch_size);
  out.features.resize(static_cast<Eigen::Index>(patches.size()), extractor.output_dim());
  out.gt_grid.reserve(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const FeatureVector f = extractor.extract(patches[i].patch);
    for (std::size_t j = 0; j < f.size(); ++j) out.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
    out.gt_grid.push_back(patches[i].gt_count);
  }
  out.gt_total = scene.count();
  return out;
}

std::vector<SceneFeatures> extract_dataset_features(const FrozenExtractor& extractor,
                                                    std::span<const Scene> scenes, int patch_size) {
  std::vector<SceneFeatures> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    out[i] = extract_scene_features(extractor, scenes[i], patch_size);
  });
  return out;
}

PatchDataset to_patch_dataset(std::span<const SceneFeatures> scenes) {
  PatchDataset ds;
  Eigen::Index rows = 0, dim = 0;
  for (const auto& s : scenes) {
    rows += s.features.rows();
    dim = s.features.cols();
  }
  ds.features.resize(rows, dim);
  ds.targets.reserve(static_cast<std::size_t>(rows));
  Eigen::Index at = 0;
  for (const auto& s : scenes) {
    if (s.features.cols() != dim) throw Error(ErrorCode::dimension_mismatch, "mixed feature widths");
    ds.features.middleRows(at, s.features.rows()) = s.features;
    at += s.features.rows();
    ds.targets.insert(ds.targets.end(), s.gt_grid.begin(), s.gt_grid.end());
  }
  return ds;
}

std::filesystem::path feature_sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".csv");
}

void save_features(const std::filesystem::path& path, const Matrix& features,
                   std::span<const FeatureRecord> records) {
  if (!records.empty() && static_cast<Eigen::Index>(records.size()) != features.rows()) {
    throw Error(ErrorCode::dimension_mismatch, "sidecar record count differs from feature rows");
  }
  binio::Writer w;
  w.bytes(kFeatureMagic);
  w.u32(static_cast<std::uint32_t>(features.rows()));
  w.u32(static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index r = 0; r < features.rows(); ++r)
    for (Eigen::Index c = 0; c < features.cols(); ++c) w.f32(static_cast<float>(features(r, c)));
  w.save(path);

  const auto sidecar = feature_sidecar_path(path);
  if (records.empty()) {
    std::filesystem::remove(sidecar);
    return;
  }
  std::ofstream out(sidecar);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + sidecar.string());
  out << "row,scene_id,grid_row,grid_col,gt_count\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << i << ',' << r.scene_id << ',' << r.grid_row << ',' << r.grid_col << ','
        << csv::format(r.gt_count) << '\n';
  }
}

FeatureFile load_precomputed(const std::filesystem::path& path, std::optional<int> expected_dim) {
  const auto bytes = binio::read_file(path);
  binio::Reader in(bytes, path.string());
  if (in.remaining() < 4 || in.bytes(4) != kFeatureMagic) in.fail("bad magic (expected FTV1)");
  const std::uint32_t count = in.u32();
  const std::uint32_t dim = in.u32();
  if (expected_dim && static_cast<int>(dim) != *expected_dim) {
    throw Error(ErrorCode::dimension_mismatch, path.string() + ": feature width " +
                                                   std::to_string(dim) + ", model expects " +
                                                   std::to_string(*expected_dim));
  }
  if (in.remaining() != std::uint64_t{count} * dim * 4) in.fail("truncated or oversized payload");
  FeatureFile out;
  out.features.resize(count, dim);
  for (std::uint32_t r = 0; r < count; ++r)
    for (std::uint32_t c = 0; c < dim; ++c) out.features(r, c) = in.f32();

  const auto sidecar = feature_sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    const auto rows = csv::read(sidecar, {"row", "scene_id", "grid_row", "grid_col", "gt_count"});
    if (rows.size() != count) {
      throw Error(ErrorCode::format_error, sidecar.string() + ": row count differs from features");
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (csv::to_int(rows[i][0]) != static_cast<long long>(i)) {
        throw Error(ErrorCode::format_error, sidecar.string() + ": rows out of order");
      }
      out.records.push_back({rows[i][1], static_cast<int>(csv::to_int(rows[i][2])),
                             static_cast<int>(csv::to_int(rows[i][3])), csv::to_double(rows[i][4])});
    }
  }
  return out;
}

FeatureFile to_feature_file(std::span<const SceneFeatures> scenes) {
  FeatureFile out;
  Eigen::Index rows = 0;
  Eigen::Index cols = scenes.empty() ? 0 : scenes.front().features.cols();
  for (const auto& s : scenes) {
    if (s.features.cols() != cols) throw Error(ErrorCode::dimension_mismatch, "scenes differ in feature width");
    rows += s.features.rows();
  }
  out.features.resize(rows, cols);
  Eigen::Index r = 0;
  for (const auto& s : scenes) {
    out.features.middleRows(r, s.features.rows()) = s.features;
    r += s.features.rows();
    for (int i = 0; i < s.grid.size(); ++i) {
      out.records.push_back({s.scene_id, i / s.grid.cols, i % s.grid.cols, s.gt_grid[static_cast<std::size_t>(i)]});
    }
  }
  return out;
}

std::vector<SceneFeatures> scenes_from_feature_file(const FeatureFile& file) {
  if (file.records.size() != static_cast<std::size_t>(file.features.rows())) {
    throw Error(ErrorCode::format_error, "feature rows need one sidecar record each");
  }
  std::vector<std::vector<std::size_t>> groups;
  std::map<std::string, std::size_t, std::less<>> index;
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    auto [it, fresh] = index.emplace(file.records[i].scene_id, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  std::vector<SceneFeatures> out;
  out.reserve(groups.size());
  for (const auto& rows : groups) {
    SceneFeatures s;
    s.scene_id = file.records[rows.front()].scene_id;
    for (std::size_t i : rows) {
      const auto& rec = file.records[i];
      if (rec.grid_row < 0 || rec.grid_col < 0) throw Error(ErrorCode::format_error, "negative grid index");
      s.grid.rows = std::max(s.grid.rows, rec.grid_row + 1);
      s.grid.cols = std::max(s.grid.cols, rec.grid_col + 1);
    }
    if (static_cast<std::size_t>(s.grid.size()) != rows.size()) {
      throw Error(ErrorCode::format_error, "scene " + s.scene_id + " does not cover its grid exactly once");
    }
    s.features.resize(s.grid.size(), file.features.cols());
    s.gt_grid.assign(static_cast<std::size_t>(s.grid.size()), 0.0);
    std::vector<bool> seen(static_cast<std::size_t>(s.grid.size()), false);
    for (std::size_t i : rows) {
      const auto& rec = file.records[i];
      const auto cell = static_cast<std::size_t>(rec.grid_row * s.grid.cols + rec.grid_col);
      if (seen[cell]) throw Error(ErrorCode::format_error, "scene " + s.scene_id + " repeats a grid cell");
      seen[cell] = true;
      s.features.row(static_cast<Eigen::Index>(cell)) = file.features.row(static_cast<Eigen::Index>(i));
      s.gt_grid[cell] = rec.gt_count;
    }
    for (double g : s.gt_grid) s.gt_total += g;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace countadapt
