// SPDX-License-Identifier: Apache-2.0
#include "countadapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "head.hpp"

namespace countadapt {
namespace {

struct Tracker {
  GradCheckResult result;
  const GradCheckOptions& opt;

  void add(double analytic, double numeric) {
    ++result.checked;
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric, opt.floor));
    result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic - numeric));
  }
};

/// Picks up to opt.max_per_tensor indices of [0, n), in order.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n > cap) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

/// Loss value plus a hash of every rectifier's on/off state. A perturbation that flips a
/// rectifier crosses a kink, where a finite difference says nothing about the derivative.
struct Probe {
  double loss = 0.0;
  std::uint64_t pattern = 0;
};

std::uint64_t activation_pattern(std::span<const Matrix> pre_acts) {
  std::string bits;
  for (const auto& z : pre_acts) {
    for (Eigen::Index i = 0; i < z.size(); ++i) bits.push_back(z.data()[i] > 0.0 ? '1' : '0');
  }
  return fnv1a64(bits);
}

/// Perturbs data[i] by ±step and compares the central difference against analytic[i].
void check_tensor(Tracker& t, double* data, const double* analytic, std::size_t n, Rng& rng,
                  const std::function<Probe()>& probe) {
  const std::uint64_t base = probe().pattern;
  for (std::size_t i : sample_indices(n, t.opt.max_per_tensor, rng)) {
    const double saved = data[i];
    bool crossed = false;
    auto at = [&](double offset) {
      data[i] = saved + offset;
      const Probe p = probe();
      data[i] = saved;
      crossed = crossed || p.pattern != base;
      return p.loss;
    };
    const double h = t.opt.step;
    const double d1 = at(h) - at(-h);
    double numeric = d1 / (2.0 * h);
    if (t.opt.five_point) {
      const double d2 = at(2.0 * h) - at(-2.0 * h);
      numeric = (8.0 * d1 - d2) / (12.0 * h);
    }
    if (crossed) {
      ++t.result.skipped_kinks;
      continue;
    }
    t.add(analytic[i], numeric);
  }
}

void fill_uniform(double* data, std::size_t n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < n; ++i) data[i] = u(rng);
}

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi, Rng& rng) {
  Matrix m(rows, cols);
  fill_uniform(m.data(), static_cast<std::size_t>(m.size()), lo, hi, rng);
  return m;
}

Vector random_vector(Eigen::Index n, double lo, double hi, Rng& rng) {
  Vector v(n);
  fill_uniform(v.data(), static_cast<std::size_t>(n), lo, hi, rng);
  return v;
}

/// An adapter whose every path carries signal: nonzero gamma, non-unit gain, offset statistics.
AdapterModule random_adapter(int dim, Rng& rng) {
  AdapterModule m = init_adapter(dim);
  m.gamma = random_vector(dim, -0.8, 0.8, rng);
  m.bn_gain = random_vector(dim, 0.5, 1.5, rng);
  m.bn_bias = random_vector(dim, -0.3, 0.3, rng);
  m.running_mean = random_vector(dim, -0.5, 0.5, rng);
  m.running_var = random_vector(dim, 0.5, 2.0, rng);
  return m;
}

void check_adapter_set(Tracker& t, std::span<AdapterModule> modules, std::span<const AdapterTrainables> grads,
                       Rng& rng, const std::function<Probe()>& loss) {
  for (std::size_t k = 0; k < modules.size(); ++k) {
    const auto n = static_cast<std::size_t>(modules[k].dim);
    check_tensor(t, modules[k].gamma.data(), grads[k].gamma.data(), n, rng, loss);
    check_tensor(t, modules[k].bn_gain.data(), grads[k].bn_gain.data(), n, rng, loss);
    check_tensor(t, modules[k].bn_bias.data(), grads[k].bn_bias.data(), n, rng, loss);
  }
}

Matrix one_hot(std::span<const int> labels, int k) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), k);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return y;
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckResult check_counting_gradients(const CountingModel& model, std::string_view domain,
                                         const Matrix& features, std::span<const double> targets,
                                         std::uint64_t seed, const GradCheckOptions& opt) {
  if (features.rows() < 2) throw Error(ErrorCode::batch_too_small, "gradient check needs a batch of at least 2");
  if (static_cast<std::size_t>(features.rows()) != targets.size()) {
    throw Error(ErrorCode::dimension_mismatch, "features and targets differ in length");
  }
  // Local copies so perturbations never reach the caller's model.
  std::array<DenseLayer, 5> layers = model.shared();
  std::vector<AdapterModule> adapters = model.domain(domain).adapters.modules;
  detail::HeadView view;
  for (std::size_t k = 0; k < 5; ++k) view.layers[k] = &layers[k];
  view.adapters = adapters;

  auto loss = [&] {
    detail::HeadTape tape;
    const Matrix pred = detail::head_forward(view, features, Mode::train, &tape);
    return Probe{loss_l2(pred, targets), activation_pattern(tape.pre_act)};
  };

  detail::HeadTape tape;
  const Matrix pred = detail::head_forward(view, features, Mode::train, &tape);
  Matrix dout = pred;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) dout(i, 0) = (pred(i, 0) - targets[i]) / static_cast<double>(pred.rows());
  detail::HeadGrads grads = detail::zero_grads(view, {true, true, true, true, true});
  detail::head_backward(view, tape, dout, grads);

  Tracker t{{"fc_head"}, opt};
  Rng rng(derive_seed(seed, "gradcheck/sample/head"));
  for (std::size_t k = 0; k < 5; ++k) {
    check_tensor(t, layers[k].weight.data(), grads.layers[k].weight.data(),
                 static_cast<std::size_t>(layers[k].weight.size()), rng, loss);
    check_tensor(t, layers[k].bias.data(), grads.layers[k].bias.data(),
                 static_cast<std::size_t>(layers[k].bias.size()), rng, loss);
  }
  check_adapter_set(t, adapters, grads.adapters, rng, loss);
  return t.result;
}

GradCheckResult check_adapter_gradients(std::uint64_t seed, Mode mode, const GradCheckOptions& opt) {
  Rng rng(derive_seed(seed, mode == Mode::train ? "gradcheck/adapter/train" : "gradcheck/adapter/infer"));
  const int dim = 7;
  const int batch = 5;
  AdapterModule m = random_adapter(dim, rng);
  Matrix x = random_matrix(batch, dim, -1.5, 1.5, rng);
  const Matrix probe = random_matrix(batch, dim, -1.0, 1.0, rng);
  auto loss = [&] { return Probe{adapter_forward(x, m, mode, nullptr).cwiseProduct(probe).sum(), 0}; };

  AdapterCache cache;
  (void)adapter_forward(x, m, mode, &cache);
  AdapterTrainables g = AdapterTrainables::zeros(dim);
  const Matrix dx = adapter_backward(probe, m, cache, g);

  Tracker t{{mode == Mode::train ? "adapter_train" : "adapter_infer"}, opt};
  std::span<AdapterModule> one(&m, 1);
  check_adapter_set(t, one, std::span<const AdapterTrainables>(&g, 1), rng, loss);
  check_tensor(t, x.data(), dx.data(), static_cast<std::size_t>(x.size()), rng, loss);
  return t.result;
}

GradCheckResult check_refiner_gradients(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(derive_seed(seed, "gradcheck/refiner"));
  RefinementNet net = RefinementNet::create_default(derive_seed(seed, "gradcheck/refiner/init"));
  // Positive biases keep the final rectifier mostly open so the check exercises every layer.
  for (auto& l : net.layers) fill_uniform(l.bias.data(), l.bias.size(), 0.05, 0.3, rng);

  std::vector<RefinementPair> batch(2);
  for (auto& p : batch) {
    p.estimate.shape = {4, 4};
    p.truth.shape = {4, 4};
    p.estimate.values.resize(16);
    p.truth.values.resize(16);
    fill_uniform(p.estimate.values.data(), 16, 0.0, 3.0, rng);
    fill_uniform(p.truth.values.data(), 16, 0.0, 3.0, rng);
  }
  RefinementNet grads = RefinementNet::zeros_like(net);
  (void)refiner_loss_and_grad(net, batch, &grads);
  auto loss = [&] {
    Probe p{refiner_loss_and_grad(net, batch, nullptr), 0};
    std::vector<Matrix> outs;
    for (const auto& pair : batch) {
      const auto pre = refiner_pre_activations(net, pair.estimate);
      outs.push_back(Eigen::Map<const Matrix>(pre.data(), 1, static_cast<Eigen::Index>(pre.size())));
    }
    p.pattern = activation_pattern(outs);
    return p;
  };

  Tracker t{{"refiner_conv"}, opt};
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    check_tensor(t, net.layers[k].weight.data(), grads.layers[k].weight.data(), net.layers[k].weight.size(), rng, loss);
    check_tensor(t, net.layers[k].bias.data(), grads.layers[k].bias.data(), net.layers[k].bias.size(), rng, loss);
  }
  return t.result;
}

GradCheckResult check_softmax_cce_gradients(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(derive_seed(seed, "gradcheck/softmax"));
  const int batch = 6;
  const int k = 4;
  Matrix z = random_matrix(batch, k, -3.0, 3.0, rng);
  std::vector<int> labels(batch);
  std::uniform_int_distribution<int> pick(0, k - 1);
  for (int& l : labels) l = pick(rng);
  const Matrix y = one_hot(labels, k);
  auto loss = [&] { return Probe{cce_loss(softmax_rows(z), y), 0}; };
  const Matrix analytic = (softmax_rows(z) - y) / static_cast<double>(batch);

  Tracker t{{"softmax_cce"}, opt};
  check_tensor(t, z.data(), analytic.data(), static_cast<std::size_t>(z.size()), rng, loss);
  return t.result;
}

GradCheckResult check_classifier_gradients(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(derive_seed(seed, "gradcheck/classifier"));
  const int n = 8;
  const int batch = 6;
  CountingModel model(n, derive_seed(seed, "gradcheck/classifier/core"));
  for (auto& l : model.mutable_shared()) fill_uniform(l.bias.data(), static_cast<std::size_t>(l.bias.size()), 0.0, 0.1, rng);
  DomainClassifierHead head = make_classifier_head(model, {"a", "b", "c"}, derive_seed(seed, "gradcheck/classifier/head"));
  for (auto& a : head.adapters) a = random_adapter(a.dim, rng);
  fill_uniform(head.final_layer.bias.data(), static_cast<std::size_t>(head.final_layer.bias.size()), -0.2, 0.2, rng);

  const Matrix x = random_matrix(batch, n, 0.0, 2.0, rng);
  std::vector<int> labels(batch);
  for (int i = 0; i < batch; ++i) labels[i] = i % 3;
  const Matrix y = one_hot(labels, 3);

  detail::HeadView view;
  for (std::size_t k = 0; k < 4; ++k) view.layers[k] = &model.shared()[k];
  view.layers[4] = &head.final_layer;
  view.adapters = head.adapters;
  view.final_relu = false;

  auto loss = [&] {
    detail::HeadTape tape;
    const Matrix logits = detail::head_forward(view, x, Mode::train, &tape);
    // The final layer has no rectifier; its pre-activations are excluded from the pattern.
    return Probe{cce_loss(softmax_rows(logits), y), activation_pattern(std::span(tape.pre_act.data(), 4))};
  };
  detail::HeadTape tape;
  const Matrix logits = detail::head_forward(view, x, Mode::train, &tape);
  const Matrix dlogits = (softmax_rows(logits) - y) / static_cast<double>(batch);
  detail::HeadGrads grads = detail::zero_grads(view, {false, false, false, false, true});
  detail::head_backward(view, tape, dlogits, grads);

  Tracker t{{"classifier_head"}, opt};
  check_tensor(t, head.final_layer.weight.data(), grads.layers[4].weight.data(),
               static_cast<std::size_t>(head.final_layer.weight.size()), rng, loss);
  check_tensor(t, head.final_layer.bias.data(), grads.layers[4].bias.data(),
               static_cast<std::size_t>(head.final_layer.bias.size()), rng, loss);
  check_adapter_set(t, head.adapters, grads.adapters, rng, loss);
  return t.result;
}

std::vector<GradCheckResult> run_grad_checks(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(derive_seed(seed, "gradcheck/head/data"));
  const int n = 8;
  const int batch = opt.head_batch;
  CountingModel model(n, derive_seed(seed, "gradcheck/head/core"));
  // Biases that keep most rectifiers open: a unit alive for one sample of the batch only has a
  // near-zero batch variance, and the next adapter then amplifies finite-difference noise.
  for (auto& l : model.mutable_shared()) fill_uniform(l.bias.data(), static_cast<std::size_t>(l.bias.size()), 0.2, 0.6, rng);
  DomainModuleSet set;
  for (int d : adapter_dims(n)) set.modules.push_back(random_adapter(d, rng));
  model.set_domain("probe", DomainEntry{std::move(set), {}, 0, std::nullopt, std::nullopt});
  const Matrix x = random_matrix(batch, n, 0.0, 2.0, rng);
  const Vector targets = random_vector(batch, 0.0, 1.0, rng);

  std::vector<GradCheckResult> out;
  out.push_back(check_counting_gradients(model, "probe", x, {targets.data(), static_cast<std::size_t>(batch)}, seed, opt));
  out.push_back(check_adapter_gradients(seed, Mode::train, opt));
  out.push_back(check_adapter_gradients(seed, Mode::infer, opt));
  out.push_back(check_refiner_gradients(seed, opt));
  out.push_back(check_softmax_cce_gradients(seed, opt));
  out.push_back(check_classifier_gradients(seed, opt));
  return out;
}

}  // namespace countadapt
