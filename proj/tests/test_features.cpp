// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>

#include "countadapt/features.hpp"
#include "test_support.hpp"

namespace countadapt {
namespace {

using testing::scratch_dir;

Image random_image(int h, int w, int c, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w, c);
  for (double& v : img.data) v = u(rng);
  return img;
}

// Direct nested-loop convolution, independent of the im2col path.
std::vector<std::vector<std::vector<double>>> naive_forward(const FrozenExtractor& ex, const Image& img) {
  std::vector<std::vector<std::vector<double>>> maps(static_cast<std::size_t>(img.channels));
  for (int ch = 0; ch < img.channels; ++ch) {
    maps[ch].assign(img.height, std::vector<double>(img.width));
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) maps[ch][r][c] = img.at(r, c, ch);
  }
  const bool rectify = ex.spec().nonlinearity == Nonlinearity::rectifier;
  for (std::size_t l = 0; l < ex.spec().layers.size(); ++l) {
    const auto& spec = ex.spec().layers[l];
    const int k = spec.kernel, s = spec.stride;
    const int in_ch = static_cast<int>(maps.size());
    const int ih = static_cast<int>(maps[0].size()), iw = static_cast<int>(maps[0][0].size());
    const int oh = (ih - k) / s + 1, ow = (iw - k) / s + 1;
    std::vector<std::vector<std::vector<double>>> next(spec.channels,
                                                       std::vector<std::vector<double>>(oh, std::vector<double>(ow)));
    for (int o = 0; o < spec.channels; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = ex.bias(l)[o];
          for (int i = 0; i < in_ch; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx)
                acc += ex.weights(l)(o, (i * k + ky) * k + kx) * maps[i][y * s + ky][x * s + kx];
          next[o][y][x] = rectify ? std::max(0.0, acc) : acc;
        }
    maps = std::move(next);
  }
  return maps;
}

TEST(FrozenExtractor, DefaultShapeAndFootprint) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default());
  EXPECT_EQ(ex.output_dim(), 64);
  ASSERT_EQ(ex.spec().layers.size(), 3u);
  EXPECT_EQ(ex.spec().layers[0], (ConvLayerSpec{5, 2, 8}));
  EXPECT_EQ(ex.spec().layers[1], (ConvLayerSpec{5, 2, 16}));
  // (((1-1)*2+5-1)*2+5-1)*2+5
  EXPECT_EQ(ex.footprint(), 29);
  EXPECT_EQ(ex.weights(0).rows(), 8);
  EXPECT_EQ(ex.weights(0).cols(), 25);
  EXPECT_EQ(ex.weights(2).cols(), 16 * 25);
}

TEST(FrozenExtractor, WeightsAreSeededAndGlorotBounded) {
  const auto a = build_frozen_extractor(FrozenExtractorSpec::desk_default(64, 3));
  const auto b = build_frozen_extractor(FrozenExtractorSpec::desk_default(64, 3));
  const auto c = build_frozen_extractor(FrozenExtractorSpec::desk_default(64, 4));
  for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE(testing::bit_equal(a.weights(l), b.weights(l)));
  EXPECT_FALSE(testing::bit_equal(a.weights(0), c.weights(0)));
  const double bound = std::sqrt(6.0 / (25.0 + 8 * 25.0));
  EXPECT_LE(a.weights(0).cwiseAbs().maxCoeff(), bound);
}

TEST(FrozenExtractor, RejectsNonPositiveDimension) {
  EXPECT_THROW_CODE(build_frozen_extractor(FrozenExtractorSpec::desk_default(0)), ErrorCode::invalid_argument);
  FrozenExtractorSpec empty;
  EXPECT_THROW_CODE(build_frozen_extractor(empty), ErrorCode::invalid_argument);
}

TEST(FrozenExtractor, LayersStringRoundTrip) {
  const auto spec = FrozenExtractorSpec::desk_default(32);
  EXPECT_EQ(spec.layers_string(), "5x5s2:8,5x5s2:16,5x5s2:32");
  EXPECT_EQ(FrozenExtractorSpec::parse_layers(spec.layers_string()), spec.layers);
  EXPECT_THROW_CODE(FrozenExtractorSpec::parse_layers("5x3s2:8"), ErrorCode::format_error);
}

TEST(Extract, MatchesNestedLoopConvolutionOracle) {
  for (auto nl : {Nonlinearity::rectifier, Nonlinearity::identity}) {
    auto spec = FrozenExtractorSpec::desk_default(12, 5, 3);
    spec.nonlinearity = nl;
    const auto ex = build_frozen_extractor(spec);
    const Image img = random_image(37, 41, 3, 19);
    const auto oracle = naive_forward(ex, img);
    const Matrix maps = ex.feature_maps(img);
    const auto f = ex.extract(img);
    ASSERT_EQ(f.size(), 12u);
    const int oh = static_cast<int>(oracle[0].size()), ow = static_cast<int>(oracle[0][0].size());
    ASSERT_EQ(maps.cols(), oh * ow);
    for (int o = 0; o < 12; ++o) {
      double mean = 0.0;
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          EXPECT_NEAR(maps(o, y * ow + x), oracle[o][y][x], 1e-12);
          mean += oracle[o][y][x];
        }
      mean /= oh * ow;
      EXPECT_NEAR(f[o], mean, 1e-12);
    }
  }
}

TEST(Extract, ConstantPatchPoolsToBruteForceSpatialMean) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default(16, 2));
  const Image img(50, 50, 1, 0.7);
  const Matrix maps = ex.feature_maps(img);
  const auto f = ex.extract(img);
  for (Eigen::Index o = 0; o < maps.rows(); ++o) {
    double sum = 0.0;
    for (Eigen::Index p = 0; p < maps.cols(); ++p) sum += maps(o, p);
    EXPECT_NEAR(f[static_cast<std::size_t>(o)], sum / static_cast<double>(maps.cols()), 1e-12);
  }
}

TEST(Extract, ZeroPatchesGiveIdenticalBiasOnlyResponse) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default());
  const auto a = ex.extract(Image(50, 50, 1));
  const auto b = ex.extract(Image(64, 33, 1));
  EXPECT_EQ(a, b);
  // Biases are zero, so the rectified response to zero input is zero.
  for (double v : a) EXPECT_EQ(v, 0.0);
}

TEST(Extract, PureAndCopyInvariant) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default());
  const Image img = random_image(50, 50, 1, 4);
  const Image copy = img;
  EXPECT_EQ(ex.extract(img), ex.extract(copy));
}

TEST(Extract, RejectsSmallOrMismatchedPatches) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default());
  EXPECT_THROW_CODE(ex.extract(Image(28, 50, 1)), ErrorCode::invalid_argument);
  EXPECT_THROW_CODE(ex.extract(Image(50, 50, 3)), ErrorCode::dimension_mismatch);
}

Scene small_scene(std::uint64_t seed) {
  Scene s = gen_scene(builtin_domain("cell-like"), 150, 100, seed);
  s.id = "scene" + std::to_string(seed);
  return s;
}

TEST(SceneFeatures, GridLayoutMatchesTiling) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default(8, 1));
  const Scene s = small_scene(3);
  const auto sf = extract_scene_features(ex, s, 50);
  EXPECT_EQ(sf.grid, (GridShape{3, 2}));
  ASSERT_EQ(sf.features.rows(), 6);
  const auto tiles = tile_patches(s, 50);
  for (int i = 0; i < 6; ++i) {
    const auto f = ex.extract(tiles[i].patch);
    for (int j = 0; j < 8; ++j) EXPECT_EQ(sf.features(i, j), f[j]);
    EXPECT_EQ(sf.gt_grid[i], tiles[i].gt_count);
  }
  EXPECT_EQ(sf.gt_total, s.count());
}

TEST(SceneFeatures, ParallelExtractionPreservesOrder) {
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default(8, 1));
  std::vector<Scene> scenes;
  for (std::uint64_t i = 0; i < 6; ++i) scenes.push_back(small_scene(i));
  const auto all = extract_dataset_features(ex, scenes, 50);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_TRUE(testing::bit_equal(all[i].features, extract_scene_features(ex, scenes[i], 50).features));
  }
  const auto ds = to_patch_dataset(all);
  EXPECT_EQ(ds.size(), 36u);
  EXPECT_EQ(ds.features.cols(), 8);
}

TEST(FeatureFile, SaveLoadRoundTripWithSidecar) {
  const auto dir = scratch_dir("ftv");
  const auto ex = build_frozen_extractor(FrozenExtractorSpec::desk_default(8, 1));
  std::vector<Scene> scenes = {small_scene(1), small_scene(2)};
  const auto feats = extract_dataset_features(ex, scenes, 50);
  const FeatureFile file = to_feature_file(feats);
  save_features(dir / "f.ftv", file.features, file.records);
  const FeatureFile back = load_precomputed(dir / "f.ftv", 8);
  EXPECT_EQ(back.records, file.records);
  ASSERT_EQ(back.features.rows(), file.features.rows());
  for (Eigen::Index i = 0; i < back.features.size(); ++i) {
    EXPECT_EQ(back.features.data()[i], static_cast<double>(static_cast<float>(file.features.data()[i])));
  }
  const auto regrouped = scenes_from_feature_file(back);
  ASSERT_EQ(regrouped.size(), 2u);
  EXPECT_EQ(regrouped[1].scene_id, feats[1].scene_id);
  EXPECT_EQ(regrouped[1].grid, feats[1].grid);
  EXPECT_EQ(regrouped[1].gt_grid, feats[1].gt_grid);
  EXPECT_EQ(regrouped[1].gt_total, feats[1].gt_total);
}

TEST(FeatureFile, HeaderLayoutIsLittleEndian) {
  const auto dir = scratch_dir("hdr");
  Matrix m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  save_features(dir / "x.ftv", m);
  std::ifstream in(dir / "x.ftv", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  ASSERT_EQ(bytes.size(), 4u + 8u + 6u * 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FTV1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[8], 3);
  float first = 0;
  std::memcpy(&first, bytes.data() + 12, 4);
  EXPECT_EQ(first, 1.0f);
  EXPECT_FALSE(std::filesystem::exists(feature_sidecar_path(dir / "x.ftv")));
}

TEST(FeatureFile, RejectsBadMagicDimensionAndTruncation) {
  const auto dir = scratch_dir("neg");
  save_features(dir / "ok.ftv", Matrix::Ones(3, 4));
  EXPECT_THROW_CODE(load_precomputed(dir / "ok.ftv", 5), ErrorCode::dimension_mismatch);
  std::ifstream in(dir / "ok.ftv", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  std::ofstream(dir / "magic.ftv", std::ios::binary) << "XTV1" << bytes.substr(4);
  EXPECT_THROW_CODE(load_precomputed(dir / "magic.ftv"), ErrorCode::format_error);
  std::ofstream(dir / "short.ftv", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW_CODE(load_precomputed(dir / "short.ftv"), ErrorCode::format_error);
  EXPECT_THROW_CODE(load_precomputed(dir / "missing.ftv"), ErrorCode::io_error);
}

TEST(FeatureFile, IncompleteGridIsRejected) {
  FeatureFile f;
  f.features = Matrix::Zero(3, 2);
  f.records = {{"a", 0, 0, 1.0}, {"a", 0, 1, 0.0}, {"a", 1, 1, 0.0}};
  EXPECT_THROW_CODE(scenes_from_feature_file(f), ErrorCode::format_error);
}

}  // namespace
}  // namespace countadapt
