// SPDX-License-Identifier: Apache-2.0
#include "head.hpp"

namespace countadapt::detail {
namespace {

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<const double> cspan_of(const Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<const double> cspan_of(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

HeadView counting_view(const CountingModel& model, const DomainModuleSet& set) {
  HeadView v;
  for (std::size_t k = 0; k < 5; ++k) v.layers[k] = &model.shared()[k];
  v.adapters = set.modules;
  v.final_relu = true;
  return v;
}

Matrix head_forward(const HeadView& view, const Matrix& x, Mode mode, HeadTape* tape) {
  if (tape) tape->adapters.assign(view.adapters.size(), {});
  Matrix h = x;
  for (std::size_t k = 0; k < 5; ++k) {
    h = adapter_forward(h, view.adapters[k], mode, tape ? &tape->adapters[k] : nullptr);
    const DenseLayer& layer = *view.layers[k];
    Matrix z = h * layer.weight;
    z.rowwise() += layer.bias.transpose();
    const bool relu = k < 4 || view.final_relu;
    if (tape) {
      tape->layer_in[k] = std::move(h);
      tape->pre_act[k] = z;
    }
    h = relu ? Matrix(z.cwiseMax(0.0)) : std::move(z);
  }
  if (view.adapters.size() == 6) {
    h = adapter_forward(h, view.adapters[5], mode, tape ? &tape->adapters[5] : nullptr);
  }
  return h;
}

HeadGrads zero_grads(const HeadView& view, const std::array<bool, 5>& layer_mask) {
  HeadGrads g;
  for (std::size_t k = 0; k < 5; ++k) {
    if (!layer_mask[k]) continue;
    g.layers[k].weight = Matrix::Zero(view.layers[k]->weight.rows(), view.layers[k]->weight.cols());
    g.layers[k].bias = Vector::Zero(view.layers[k]->bias.size());
  }
  for (const auto& a : view.adapters) g.adapters.push_back(AdapterTrainables::zeros(a.dim));
  return g;
}

void head_backward(const HeadView& view, const HeadTape& tape, const Matrix& dout, HeadGrads& grads) {
  Matrix d = dout;
  if (view.adapters.size() == 6) {
    d = adapter_backward(d, view.adapters[5], tape.adapters[5], grads.adapters[5]);
  }
  for (int k = 4; k >= 0; --k) {
    const bool relu = k < 4 || view.final_relu;
    if (relu) d = d.cwiseProduct((tape.pre_act[k].array() > 0.0).cast<double>().matrix());
    DenseLayer& g = grads.layers[k];
    if (g.weight.size() != 0) {
      g.weight.noalias() += tape.layer_in[k].transpose() * d;
      g.bias += d.colwise().sum().transpose();
    }
    Matrix dh = d * view.layers[k]->weight.transpose();
    d = adapter_backward(dh, view.adapters[k], tape.adapters[k], grads.adapters[k]);
  }
}

void adagrad_dense(DenseLayer& param, const DenseLayer& grad, DenseLayer& accum, const TrainConfig& cfg) {
  adagrad_update(span_of(param.weight), cspan_of(grad.weight), span_of(accum.weight),
                 cfg.learning_rate, cfg.weight_decay, cfg.adagrad_epsilon);
  adagrad_update(span_of(param.bias), cspan_of(grad.bias), span_of(accum.bias), cfg.learning_rate,
                 0.0, cfg.adagrad_epsilon);
}

void adagrad_adapter(AdapterModule& param, const AdapterTrainables& grad, AdapterTrainables& accum,
                     const TrainConfig& cfg) {
  adagrad_update(span_of(param.gamma), cspan_of(grad.gamma), span_of(accum.gamma), cfg.learning_rate,
                 cfg.weight_decay, cfg.adagrad_epsilon);
  adagrad_update(span_of(param.bn_gain), cspan_of(grad.bn_gain), span_of(accum.bn_gain),
                 cfg.learning_rate, 0.0, cfg.adagrad_epsilon);
  adagrad_update(span_of(param.bn_bias), cspan_of(grad.bn_bias), span_of(accum.bn_bias),
                 cfg.learning_rate, 0.0, cfg.adagrad_epsilon);
}

Matrix gather_rows(const Matrix& source, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), source.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = source.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

}  // namespace countadapt::detail
