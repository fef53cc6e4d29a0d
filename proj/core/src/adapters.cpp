// SPDX-License-Identifier: Apache-2.0
#include "countadapt/adapters.hpp"

#include <cmath>
#include <string>

namespace countadapt {

AdapterModule init_adapter(int dim) {
  if (dim < 1) throw Error(ErrorCode::invalid_argument, "adapter dim must be >= 1");
  AdapterModule m;
  m.dim = dim;
  m.gamma = Vector::Zero(dim);
  m.bn_gain = Vector::Ones(dim);
  m.bn_bias = Vector::Zero(dim);
  m.running_mean = Vector::Zero(dim);
  m.running_var = Vector::Ones(dim);
  return m;
}

AdapterTrainables AdapterTrainables::zeros(int dim) {
  return {Vector::Zero(dim), Vector::Zero(dim), Vector::Zero(dim)};
}

AdapterTrainables AdapterTrainables::of(const AdapterModule& m) {
  return {m.gamma, m.bn_gain, m.bn_bias};
}

Matrix adapter_forward(const Matrix& x, const AdapterModule& m, Mode mode, AdapterCache* cache) {
  if (x.cols() != m.dim) {
    throw Error(ErrorCode::dimension_mismatch, "adapter expects width " + std::to_string(m.dim) +
                                                   ", got " + std::to_string(x.cols()));
  }
  const Eigen::Index batch = x.rows();
  Vector mean, var;
  if (mode == Mode::train) {
    if (batch < 2) {
      throw Error(ErrorCode::batch_too_small,
                  "train-mode adapter needs a batch of at least 2 rows for batch statistics");
    }
    mean = x.colwise().mean().transpose();
    var = (x.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
  } else {
    mean = m.running_mean;
    var = m.running_var;
  }
  const Vector inv_std = (var.array() + m.bn_epsilon).rsqrt().matrix();
  Matrix xhat = ((x.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array()).matrix();

  Matrix y = x;
  for (Eigen::Index j = 0; j < m.dim; ++j) {
    const double g = m.gamma(j);
    if (g == 0.0) continue;
    y.col(j).array() += g * (m.bn_gain(j) * xhat.col(j).array() + m.bn_bias(j));
  }
  if (cache) {
    cache->mode = mode;
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    if (mode == Mode::train) {
      cache->batch_mean = std::move(mean);
      cache->batch_var = std::move(var);
    } else {
      cache->batch_mean.resize(0);
      cache->batch_var.resize(0);
    }
  }
  return y;
}

void update_running_stats(AdapterModule& m, const AdapterCache& cache) {
  if (cache.mode != Mode::train) return;
  const double mom = m.bn_momentum;
  m.running_mean = mom * m.running_mean + (1.0 - mom) * cache.batch_mean;
  m.running_var = mom * m.running_var + (1.0 - mom) * cache.batch_var;
}

Matrix adapter_forward_train(const Matrix& x, AdapterModule& m, AdapterCache* cache) {
  AdapterCache local;
  AdapterCache& c = cache ? *cache : local;
  Matrix y = adapter_forward(x, m, Mode::train, &c);
  update_running_stats(m, c);
  return y;
}

Matrix adapter_backward(const Matrix& dy, const AdapterModule& m, const AdapterCache& cache,
                        AdapterTrainables& grads) {
  const auto batch = static_cast<double>(dy.rows());
  Matrix dx = dy;
  for (Eigen::Index j = 0; j < m.dim; ++j) {
    const auto xhat = cache.xhat.col(j).array();
    const auto dyj = dy.col(j).array();
    const Eigen::ArrayXd z = m.bn_gain(j) * xhat + m.bn_bias(j);
    grads.gamma(j) += (dyj * z).sum();
    const Eigen::ArrayXd dz = m.gamma(j) * dyj;
    grads.bn_gain(j) += (dz * xhat).sum();
    grads.bn_bias(j) += dz.sum();
    const Eigen::ArrayXd dxhat = m.bn_gain(j) * dz;
    if (cache.mode == Mode::train) {
      const double s1 = dxhat.sum();
      const double s2 = (dxhat * xhat).sum();
      dx.col(j).array() += cache.inv_std(j) / batch * (batch * dxhat - s1 - xhat * s2);
    } else {
      dx.col(j).array() += cache.inv_std(j) * dxhat;
    }
  }
  return dx;
}

std::array<int, kAdapterPositions> adapter_dims(int feature_dim) {
  return {feature_dim, 256, 128, 64, 64, 1};
}

DomainModuleSet DomainModuleSet::identity(std::span<const int> dims) {
  DomainModuleSet s;
  for (int d : dims) s.modules.push_back(init_adapter(d));
  return s;
}

std::size_t adapter_param_count(const DomainModuleSet& set) {
  std::size_t n = 0;
  for (const auto& m : set.modules) n += 3 * static_cast<std::size_t>(m.dim);
  return n;
}

}  // namespace countadapt
