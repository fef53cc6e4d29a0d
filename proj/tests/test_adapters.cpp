// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "countadapt/adapters.hpp"
#include "test_support.hpp"

namespace countadapt {
namespace {

using testing::bit_equal;
using testing::random_matrix;
using testing::random_vector;

AdapterModule random_adapter(int dim, std::uint64_t seed) {
  AdapterModule m = init_adapter(dim);
  m.gamma = random_vector(dim, seed, -1.0, 1.0);
  m.bn_gain = random_vector(dim, seed + 1, 0.5, 1.5);
  m.bn_bias = random_vector(dim, seed + 2, -0.5, 0.5);
  m.running_mean = random_vector(dim, seed + 3, -0.3, 0.3);
  m.running_var = random_vector(dim, seed + 4, 0.5, 2.0);
  return m;
}

// Scalar-loop reference for the forward pass.
Matrix reference_forward(const Matrix& x, const AdapterModule& m, Mode mode) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double mean = m.running_mean(j), var = m.running_var(j);
    if (mode == Mode::train) {
      mean = 0.0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) mean += x(i, j);
      mean /= static_cast<double>(x.rows());
      var = 0.0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) var += (x(i, j) - mean) * (x(i, j) - mean);
      var /= static_cast<double>(x.rows());
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double bn = m.bn_gain(j) * (x(i, j) - mean) / std::sqrt(var + 1e-5) + m.bn_bias(j);
      y(i, j) = x(i, j) + m.gamma(j) * bn;
    }
  }
  return y;
}

TEST(Adapter, InitIsIdentityWithDocumentedDefaults) {
  const AdapterModule m = init_adapter(5);
  EXPECT_EQ(m.gamma, Vector::Zero(5));
  EXPECT_EQ(m.bn_gain, Vector::Ones(5));
  EXPECT_EQ(m.running_var, Vector::Ones(5));
  EXPECT_EQ(m.bn_epsilon, 1e-5);
  EXPECT_EQ(m.bn_momentum, 0.99);
  EXPECT_THROW_CODE(init_adapter(0), ErrorCode::invalid_argument);
}

TEST(Adapter, FreshModuleIsBitExactIdentityForRandomInputs) {
  Rng rng(2024);
  std::uniform_int_distribution<int> dim(1, 300), batch(2, 40);
  std::uniform_real_distribution<double> scale(1e-6, 1e6);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = dim(rng);
    const AdapterModule m = init_adapter(d);
    const Matrix x = random_matrix(batch(rng), d, rng(), -1.0, 1.0) * scale(rng);
    EXPECT_TRUE(bit_equal(adapter_forward(x, m, Mode::infer), x));
    EXPECT_TRUE(bit_equal(adapter_forward(x, m, Mode::train), x));
  }
}

TEST(Adapter, ZeroGammaChannelPassesThroughEvenWhenOthersAdapt) {
  AdapterModule m = random_adapter(4, 3);
  m.gamma(2) = 0.0;
  const Matrix x = random_matrix(6, 4, 8);
  const Matrix y = adapter_forward(x, m, Mode::train);
  EXPECT_TRUE(bit_equal(Vector(y.col(2)), Vector(x.col(2))));
  EXPECT_FALSE(bit_equal(Vector(y.col(0)), Vector(x.col(0))));
}

TEST(Adapter, ForwardMatchesScalarReferenceInBothModes) {
  const AdapterModule m = random_adapter(7, 11);
  const Matrix x = random_matrix(9, 7, 12, -2.0, 3.0);
  for (Mode mode : {Mode::train, Mode::infer}) {
    const Matrix y = adapter_forward(x, m, mode);
    EXPECT_LT((y - reference_forward(x, m, mode)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Adapter, TrainModeUsesBiasedVariance) {
  AdapterModule m = init_adapter(1);
  m.gamma(0) = 1.0;
  Matrix x(2, 1);
  x << 0.0, 2.0;
  // mean 1, biased var 1, so BN gives -1/sqrt(1+eps) and +1/sqrt(1+eps).
  const Matrix y = adapter_forward(x, m, Mode::train);
  EXPECT_NEAR(y(0, 0), -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y(1, 0), 2.0 + 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(Adapter, RunningStatsFollowMomentum) {
  AdapterModule m = init_adapter(1);
  Matrix x(2, 1);
  x << 0.0, 2.0;
  adapter_forward_train(x, m);
  EXPECT_NEAR(m.running_mean(0), 0.01 * 1.0, 1e-15);
  EXPECT_NEAR(m.running_var(0), 0.99 * 1.0 + 0.01 * 1.0, 1e-15);
  const Vector before = m.running_mean;
  adapter_forward(x, m, Mode::train);
  EXPECT_TRUE(bit_equal(m.running_mean, before));
}

TEST(Adapter, SingleRowTrainBatchIsRejected) {
  const AdapterModule m = init_adapter(3);
  EXPECT_THROW_CODE(adapter_forward(Matrix::Ones(1, 3), m, Mode::train), ErrorCode::batch_too_small);
  EXPECT_NO_THROW(adapter_forward(Matrix::Ones(1, 3), m, Mode::infer));
  EXPECT_THROW_CODE(adapter_forward(Matrix::Ones(2, 4), m, Mode::infer), ErrorCode::dimension_mismatch);
}

// L = Σ w ⊙ y with fixed random weights w; central differences on every entry.
TEST(Adapter, BackwardMatchesFiniteDifferences) {
  for (Mode mode : {Mode::train, Mode::infer}) {
    AdapterModule m = random_adapter(5, 21);
    const Matrix x = random_matrix(6, 5, 22, -1.5, 1.5);
    const Matrix w = random_matrix(6, 5, 23);
    auto loss = [&](const Matrix& in, const AdapterModule& mod) {
      return (adapter_forward(in, mod, mode).array() * w.array()).sum();
    };
    AdapterCache cache;
    adapter_forward(x, m, mode, &cache);
    AdapterTrainables g = AdapterTrainables::zeros(5);
    const Matrix dx = adapter_backward(w, m, cache, g);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Matrix xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      EXPECT_NEAR(dx.data()[i], (loss(xp, m) - loss(xm, m)) / (2 * h), 1e-6);
    }
    auto check = [&](Vector AdapterModule::*field, const Vector& analytic) {
      for (int j = 0; j < 5; ++j) {
        AdapterModule p = m, q = m;
        (p.*field)(j) += h;
        (q.*field)(j) -= h;
        EXPECT_NEAR(analytic(j), (loss(x, p) - loss(x, q)) / (2 * h), 1e-6);
      }
    };
    check(&AdapterModule::gamma, g.gamma);
    check(&AdapterModule::bn_gain, g.bn_gain);
    check(&AdapterModule::bn_bias, g.bn_bias);
  }
}

TEST(DomainModuleSet, DimsAndParameterCount) {
  const auto dims = adapter_dims(64);
  EXPECT_EQ(dims, (std::array<int, 6>{64, 256, 128, 64, 64, 1}));
  for (int n : {1, 8, 64, 100}) {
    const auto d = adapter_dims(n);
    const auto set = DomainModuleSet::identity(d);
    EXPECT_EQ(set.modules.size(), 6u);
    EXPECT_EQ(adapter_param_count(set), static_cast<std::size_t>(3 * (n + 513)));
  }
}

}  // namespace
}  // namespace countadapt
