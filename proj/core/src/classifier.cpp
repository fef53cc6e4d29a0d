// SPDX-License-Identifier: Apache-2.0
#include "countadapt/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "countadapt/init.hpp"
#include "head.hpp"

namespace countadapt {
namespace {

detail::HeadView classifier_view(const CountingModel& model, const DomainClassifierHead& head) {
  detail::HeadView v;
  for (std::size_t k = 0; k < 4; ++k) v.layers[k] = &model.shared()[k];
  v.layers[4] = &head.final_layer;
  v.adapters = head.adapters;
  v.final_relu = false;
  return v;
}

void check_head(const CountingModel& model, const DomainClassifierHead& head) {
  const auto dims = adapter_dims(model.feature_dim());
  bool ok = head.adapters.size() == 5 && head.num_classes() >= 2 &&
            head.final_layer.weight.rows() == kHeadWidths[3] &&
            head.final_layer.weight.cols() == head.num_classes() &&
            head.final_layer.bias.size() == head.num_classes();
  for (std::size_t i = 0; ok && i < 5; ++i) ok = head.adapters[i].dim == dims[i];
  if (!ok) throw Error(ErrorCode::dimension_mismatch, "classifier head does not fit this core");
}

}  // namespace

std::size_t DomainClassifierHead::trainable_param_count() const {
  std::size_t n = static_cast<std::size_t>(final_layer.weight.size() + final_layer.bias.size());
  for (const auto& a : adapters) n += 3 * static_cast<std::size_t>(a.dim);
  return n;
}

DomainClassifierHead make_classifier_head(const CountingModel& model, std::vector<std::string> domains,
                                          std::uint64_t seed) {
  if (domains.size() < 2) throw Error(ErrorCode::invalid_argument, "classifier needs K >= 2 domains");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    require_valid_domain_id(domains[i]);
    if (std::find(domains.begin(), domains.begin() + static_cast<std::ptrdiff_t>(i), domains[i]) !=
        domains.begin() + static_cast<std::ptrdiff_t>(i)) {
      throw Error(ErrorCode::invalid_argument, "duplicate class '" + domains[i] + "'");
    }
  }
  DomainClassifierHead head;
  const int k = static_cast<int>(domains.size());
  head.domains = std::move(domains);
  const auto dims = adapter_dims(model.feature_dim());
  for (std::size_t i = 0; i < 5; ++i) head.adapters.push_back(init_adapter(dims[i]));
  head.final_layer.weight = glorot_uniform_init(kHeadWidths[3], k, derive_seed(seed, "classifier"));
  head.final_layer.bias = Vector::Zero(k);
  return head;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

double cce_loss(const Matrix& probs, const Matrix& onehot) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "cce_loss operands differ in shape");
  }
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (std::abs(probs.row(i).sum() - 1.0) > 1e-6) {
      throw Error(ErrorCode::invalid_argument, "probability rows must sum to 1");
    }
  }
  if (probs.rows() == 0) return 0.0;
  double s = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index j = 0; j < probs.cols(); ++j)
      if (onehot(i, j) != 0.0) s += onehot(i, j) * std::log(std::max(probs(i, j), 1e-12));
  return -s / static_cast<double>(probs.rows());
}

Matrix classifier_logits(const CountingModel& model, const DomainClassifierHead& head,
                         const Matrix& features, Mode mode) {
  check_head(model, head);
  if (features.cols() != model.feature_dim()) {
    throw Error(ErrorCode::dimension_mismatch, "feature width differs from the core's");
  }
  return detail::head_forward(classifier_view(model, head), features, mode, nullptr);
}

Matrix classify_patches(const CountingModel& model, const DomainClassifierHead& head, const Matrix& features) {
  return softmax_rows(classifier_logits(model, head, features, Mode::infer));
}

std::vector<double> classify_patch(const CountingModel& model, const DomainClassifierHead& head,
                                   const FeatureVector& features) {
  Matrix x(1, static_cast<Eigen::Index>(features.size()));
  for (std::size_t j = 0; j < features.size(); ++j) x(0, static_cast<Eigen::Index>(j)) = features[j];
  const Matrix p = classify_patches(model, head, x);
  return {p.data(), p.data() + p.size()};
}

SceneClassification classify_scene(const CountingModel& model, const DomainClassifierHead& head,
                                   const SceneFeatures& scene) {
  const Matrix p = classify_patches(model, head, scene.features);
  const int k = head.num_classes();
  SceneClassification out;
  out.vote_shares.assign(static_cast<std::size_t>(k), 0.0);
  out.mean_probs.assign(static_cast<std::size_t>(k), 0.0);
  if (p.rows() == 0) throw Error(ErrorCode::invalid_argument, "scene has no patches");
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index best = 0;
    p.row(i).maxCoeff(&best);
    out.vote_shares[static_cast<std::size_t>(best)] += 1.0;
    for (int j = 0; j < k; ++j) out.mean_probs[static_cast<std::size_t>(j)] += p(i, j);
  }
  for (int j = 0; j < k; ++j) {
    out.vote_shares[static_cast<std::size_t>(j)] /= static_cast<double>(p.rows());
    out.mean_probs[static_cast<std::size_t>(j)] /= static_cast<double>(p.rows());
  }
  std::size_t winner = 0;
  for (std::size_t j = 1; j < out.vote_shares.size(); ++j) {
    if (out.vote_shares[j] > out.vote_shares[winner] ||
        (out.vote_shares[j] == out.vote_shares[winner] && out.mean_probs[j] > out.mean_probs[winner])) {
      winner = j;
    }
  }
  out.domain = head.domains[winner];
  return out;
}

SceneClassification classify_scene(const CountingModel& model, const DomainClassifierHead& head,
                                   const FrozenExtractor& extractor, const Scene& scene, int patch_size,
                                   SceneClassifyMode mode) {
  if (mode == SceneClassifyMode::patch_vote) {
    return classify_scene(model, head, extract_scene_features(extractor, scene, patch_size));
  }
  SceneFeatures one;
  one.scene_id = scene.id;
  one.grid = {1, 1};
  const FeatureVector f = extractor.extract(resize_bilinear(scene.pixels, patch_size, patch_size));
  one.features = Eigen::Map<const Eigen::RowVectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  return classify_scene(model, head, one);
}

ClassifierDataset make_classifier_dataset(std::span<const std::string> domains,
                                          std::span<const std::vector<SceneFeatures>> per_domain) {
  if (domains.size() != per_domain.size()) {
    throw Error(ErrorCode::invalid_argument, "one scene list per class expected");
  }
  ClassifierDataset ds;
  ds.domains.assign(domains.begin(), domains.end());
  for (const auto& scenes : per_domain) ds.features.push_back(to_patch_dataset(scenes).features);
  return ds;
}

DomainClassifierHead train_classifier(const CountingModel& model, const ClassifierDataset& data,
                                      const TrainConfig& config, TrainLog* log) {
  config.validate();
  if (!model.shared_frozen()) {
    throw Error(ErrorCode::invalid_argument, "classifier training requires a primed (frozen) core");
  }
  const std::size_t k = data.domains.size();
  if (data.features.size() != k) throw Error(ErrorCode::invalid_argument, "features per class expected");
  DomainClassifierHead head = make_classifier_head(model, data.domains, derive_seed(config.seed, "head"));
  for (const auto& f : data.features) {
    if (f.rows() < 1) throw Error(ErrorCode::invalid_argument, "every class needs training patches");
    if (f.cols() != model.feature_dim()) throw Error(ErrorCode::dimension_mismatch, "feature width");
  }

  const std::size_t per_class = std::max<std::size_t>(1, static_cast<std::size_t>(config.batch_size) / k);
  std::vector<BatchSampler> samplers;
  for (std::size_t c = 0; c < k; ++c) {
    samplers.emplace_back(static_cast<std::size_t>(data.features[c].rows()), per_class,
                          derive_seed(config.seed, "classifier/" + data.domains[c]));
  }

  const double a0 = config.initial_accumulator;
  std::vector<AdapterTrainables> adapter_accum;
  for (const auto& a : head.adapters) {
    adapter_accum.push_back({Vector::Constant(a.dim, a0), Vector::Constant(a.dim, a0), Vector::Constant(a.dim, a0)});
  }
  DenseLayer final_accum{Matrix::Constant(head.final_layer.weight.rows(), head.final_layer.weight.cols(), a0),
                         Vector::Constant(head.final_layer.bias.size(), a0)};
  const std::array<bool, 5> mask = {false, false, false, false, true};

  const auto batch = static_cast<Eigen::Index>(per_class * k);
  Matrix x(batch, model.feature_dim());
  Matrix onehot = Matrix::Zero(batch, static_cast<Eigen::Index>(k));
  for (int it = 0; it < config.iterations; ++it) {
    Eigen::Index row = 0;
    onehot.setZero();
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i : samplers[c].next()) {
        x.row(row) = data.features[c].row(static_cast<Eigen::Index>(i));
        onehot(row, static_cast<Eigen::Index>(c)) = 1.0;
        ++row;
      }
    }
    const detail::HeadView view = classifier_view(model, head);
    detail::HeadTape tape;
    const Matrix probs = softmax_rows(detail::head_forward(view, x, Mode::train, &tape));
    if (log) log->loss.push_back(cce_loss(probs, onehot));
    const Matrix dlogits = (probs - onehot) / static_cast<double>(batch);
    detail::HeadGrads grads = detail::zero_grads(view, mask);
    detail::head_backward(view, tape, dlogits, grads);
    for (std::size_t a = 0; a < head.adapters.size(); ++a) {
      update_running_stats(head.adapters[a], tape.adapters[a]);
      detail::adagrad_adapter(head.adapters[a], grads.adapters[a], adapter_accum[a], config);
    }
    detail::adagrad_dense(head.final_layer, grads.layers[4], final_accum, config);
  }
  return head;
}

}  // namespace countadapt
