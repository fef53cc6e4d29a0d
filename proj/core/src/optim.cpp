// SPDX-License-Identifier: Apache-2.0
#include "countadapt/init.hpp"
#include "countadapt/optim.hpp"

#include <cmath>
#include <numeric>

namespace countadapt {

double glorot_bound(int fan_in, int fan_out) {
  if (fan_in + fan_out <= 0) throw Error(ErrorCode::invalid_argument, "glorot fans must be positive");
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void glorot_uniform_fill(std::span<double> out, int fan_in, int fan_out, Rng& rng) {
  const double b = glorot_bound(fan_in, fan_out);
  std::uniform_real_distribution<double> dist(-b, b);
  for (double& v : out) v = dist(rng);
}

Matrix glorot_uniform_init(int rows, int cols, std::uint64_t seed) {
  if (rows < 1 || cols < 1) throw Error(ErrorCode::invalid_argument, "glorot matrix must be non-empty");
  Matrix m(rows, cols);
  Rng rng(seed);
  glorot_uniform_fill({m.data(), static_cast<std::size_t>(m.size())}, rows, cols, rng);
  return m;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::invalid_argument, "learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::invalid_argument, "weight_decay must be >= 0");
  if (iterations < 0) throw Error(ErrorCode::invalid_argument, "iterations must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch_size must be >= 1");
  if (!(adagrad_epsilon >= 0.0)) throw Error(ErrorCode::invalid_argument, "adagrad_epsilon must be >= 0");
  if (!(initial_accumulator >= 0.0)) throw Error(ErrorCode::invalid_argument, "initial_accumulator must be >= 0");
}

TrainConfig TrainConfig::paper_defaults() {
  TrainConfig c;
  c.iterations = 10000;
  c.batch_size = 256;
  return c;
}

AdagradResult adagrad_step(double param, double grad, double accum, double learning_rate,
                           double decay, double epsilon) {
  const double g = grad + decay * param;
  const double a = accum + g * g;
  return {param - learning_rate * g / (std::sqrt(a) + epsilon), a};
}

void adagrad_update(std::span<double> params, std::span<const double> grads, std::span<double> accum,
                    double learning_rate, double decay, double epsilon) {
  if (params.size() != grads.size() || params.size() != accum.size()) {
    throw Error(ErrorCode::dimension_mismatch, "adagrad spans differ in length");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto r = adagrad_step(params[i], grads[i], accum[i], learning_rate, decay, epsilon);
    params[i] = r.param;
    accum[i] = r.accum;
  }
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : n_(dataset_size), batch_(batch_size), rng_(seed) {
  if (n_ == 0) throw Error(ErrorCode::invalid_argument, "cannot sample from an empty dataset");
  if (batch_ == 0) throw Error(ErrorCode::invalid_argument, "batch size must be >= 1");
  order_.resize(n_);
  reshuffle();
}

void BatchSampler::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  while (out.size() < batch_) {
    if (pos_ == n_) reshuffle();
    out.push_back(order_[pos_++]);
  }
  return out;
}

void BatchSampler::skip(std::uint64_t batches) {
  for (std::uint64_t i = 0; i < batches; ++i) (void)next();
}

}  // namespace countadapt
