// SPDX-License-Identifier: Apache-2.0
#include "countadapt/regressor.hpp"

#include <numeric>

#include "countadapt/init.hpp"
#include "head.hpp"

namespace countadapt {

using detail::HeadTape;
using detail::HeadView;

CountingModel::CountingModel(int feature_dim, std::uint64_t seed) : feature_dim_(feature_dim) {
  if (feature_dim < 1) throw Error(ErrorCode::invalid_argument, "feature_dim must be >= 1");
  int in = feature_dim;
  for (std::size_t k = 0; k < 5; ++k) {
    const int out = kHeadWidths[k];
    shared_[k].weight = glorot_uniform_init(in, out, derive_seed(seed, "fc" + std::to_string(k + 1)));
    shared_[k].bias = Vector::Zero(out);
    in = out;
  }
}

CountingModel zero_counting_model(int feature_dim) {
  if (feature_dim < 1) throw Error(ErrorCode::invalid_argument, "feature_dim must be >= 1");
  CountingModel m;
  m.feature_dim_ = feature_dim;
  int in = feature_dim;
  for (std::size_t k = 0; k < 5; ++k) {
    m.shared_[k].weight = Matrix::Zero(in, kHeadWidths[k]);
    m.shared_[k].bias = Vector::Zero(kHeadWidths[k]);
    in = kHeadWidths[k];
  }
  return m;
}

std::array<DenseLayer, 5>& CountingModel::mutable_shared() {
  if (frozen_) throw Error(ErrorCode::invalid_argument, "shared layers are frozen");
  return shared_;
}

bool CountingModel::has_domain(std::string_view name) const { return domains_.find(name) != domains_.end(); }

const DomainEntry& CountingModel::domain(std::string_view name) const {
  auto it = domains_.find(name);
  if (it == domains_.end()) throw Error(ErrorCode::domain_not_found, "'" + std::string(name) + "'");
  return it->second;
}

DomainEntry& CountingModel::domain(std::string_view name) {
  auto it = domains_.find(name);
  if (it == domains_.end()) throw Error(ErrorCode::domain_not_found, "'" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> CountingModel::domain_names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : domains_) out.push_back(name);
  return out;
}

void CountingModel::check_adapter_set(const DomainModuleSet& set) const {
  const auto dims = adapter_dims(feature_dim_);
  bool ok = set.modules.size() == dims.size();
  for (std::size_t i = 0; ok && i < dims.size(); ++i) ok = set.modules[i].dim == dims[i];
  if (!ok) throw Error(ErrorCode::dimension_mismatch, "adapter set does not match the head architecture");
}

DomainEntry& CountingModel::register_domain(const std::string& name) {
  require_valid_domain_id(name);
  if (has_domain(name)) throw Error(ErrorCode::domain_exists, "'" + name + "'");
  DomainEntry e;
  e.adapters = DomainModuleSet::identity(adapter_dims(feature_dim_));
  return domains_.emplace(name, std::move(e)).first->second;
}

void CountingModel::set_domain(const std::string& name, DomainEntry entry) {
  require_valid_domain_id(name);
  check_adapter_set(entry.adapters);
  domains_.insert_or_assign(name, std::move(entry));
}

void CountingModel::remove_domain(std::string_view name) {
  auto it = domains_.find(name);
  if (it == domains_.end()) throw Error(ErrorCode::domain_not_found, "'" + std::string(name) + "'");
  domains_.erase(it);
}

Matrix CountingModel::forward(const Matrix& features, std::string_view name, Mode mode) const {
  const DomainEntry& entry = domain(name);
  if (features.cols() != feature_dim_) {
    throw Error(ErrorCode::dimension_mismatch, "features have width " + std::to_string(features.cols()) +
                                                   ", model expects " + std::to_string(feature_dim_));
  }
  return detail::head_forward(detail::counting_view(*this, entry.adapters), features, mode, nullptr);
}

std::size_t CountingModel::shared_param_count() const {
  std::size_t n = 0;
  for (const auto& l : shared_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

double loss_l2(const Matrix& preds, std::span<const double> targets) {
  if (preds.cols() != 1 || static_cast<std::size_t>(preds.rows()) != targets.size()) {
    throw Error(ErrorCode::dimension_mismatch, "loss_l2 expects batch × 1 predictions");
  }
  if (targets.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double d = preds(static_cast<Eigen::Index>(i), 0) - targets[i];
    s += d * d;
  }
  return s / (2.0 * static_cast<double>(targets.size()));
}

namespace {

std::vector<AdapterTrainables> fresh_accumulators(const DomainModuleSet& set, double value) {
  std::vector<AdapterTrainables> out;
  for (const auto& m : set.modules) {
    out.push_back({Vector::Constant(m.dim, value), Vector::Constant(m.dim, value), Vector::Constant(m.dim, value)});
  }
  return out;
}

void require_trainable_data(const CountingModel& model, const PatchDataset& data) {
  if (data.features.cols() != model.feature_dim()) {
    throw Error(ErrorCode::dimension_mismatch, "training features have width " +
                                                   std::to_string(data.features.cols()) +
                                                   ", model expects " + std::to_string(model.feature_dim()));
  }
  if (data.size() < 2) {
    throw Error(ErrorCode::batch_too_small, "need at least 2 training patches");
  }
  if (static_cast<std::size_t>(data.features.rows()) != data.size()) {
    throw Error(ErrorCode::dimension_mismatch, "feature rows and targets differ in count");
  }
}

// One loop for both priming (shared layers trainable) and adaptation (adapters only).
TrainLog run_counting_training(CountingModel& model, DomainEntry& entry, const PatchDataset& data,
                               const std::string& domain, const TrainConfig& cfg, bool train_shared) {
  cfg.validate();
  std::array<DenseLayer, 5> shared_accum;
  std::array<bool, 5> mask{};
  if (train_shared) {
    mask.fill(true);
    for (std::size_t k = 0; k < 5; ++k) {
      const auto& w = model.shared()[k].weight;
      shared_accum[k].weight = Matrix::Constant(w.rows(), w.cols(), cfg.initial_accumulator);
      shared_accum[k].bias = Vector::Constant(model.shared()[k].bias.size(), cfg.initial_accumulator);
    }
  }
  if (entry.adagrad.empty()) entry.adagrad = fresh_accumulators(entry.adapters, cfg.initial_accumulator);

  BatchSampler sampler(data.size(), static_cast<std::size_t>(cfg.batch_size),
                       derive_seed(cfg.seed, "batches/" + domain));
  sampler.skip(entry.steps_done);

  TrainLog log;
  log.loss.reserve(static_cast<std::size_t>(cfg.iterations));
  std::vector<double> targets(static_cast<std::size_t>(cfg.batch_size));
  for (int it = 0; it < cfg.iterations; ++it) {
    const auto idx = sampler.next();
    const Matrix x = detail::gather_rows(data.features, idx);
    for (std::size_t i = 0; i < idx.size(); ++i) targets[i] = data.targets[idx[i]];

    const HeadView view = detail::counting_view(model, entry.adapters);
    HeadTape tape;
    const Matrix pred = detail::head_forward(view, x, Mode::train, &tape);
    log.loss.push_back(loss_l2(pred, targets));

    Matrix dout(pred.rows(), 1);
    const double inv_b = 1.0 / static_cast<double>(idx.size());
    for (Eigen::Index i = 0; i < pred.rows(); ++i) dout(i, 0) = (pred(i, 0) - targets[static_cast<std::size_t>(i)]) * inv_b;

    detail::HeadGrads grads = detail::zero_grads(view, mask);
    detail::head_backward(view, tape, dout, grads);

    for (std::size_t k = 0; k < entry.adapters.modules.size(); ++k) {
      update_running_stats(entry.adapters.modules[k], tape.adapters[k]);
      detail::adagrad_adapter(entry.adapters.modules[k], grads.adapters[k], entry.adagrad[k], cfg);
    }
    if (train_shared) {
      auto& shared = model.mutable_shared();
      for (std::size_t k = 0; k < 5; ++k) detail::adagrad_dense(shared[k], grads.layers[k], shared_accum[k], cfg);
    }
    ++entry.steps_done;
  }
  return log;
}

}  // namespace

TrainLog prime(CountingModel& model, const PatchDataset& data, const std::string& domain,
               const TrainConfig& config) {
  if (model.shared_frozen()) {
    throw Error(ErrorCode::invalid_argument, "model is already primed; use adapt for new domains");
  }
  require_trainable_data(model, data);
  config.validate();
  DomainEntry& entry = model.register_domain(domain);
  TrainLog log = run_counting_training(model, entry, data, domain, config, true);
  model.freeze_shared();
  return log;
}

TrainLog adapt(CountingModel& model, const PatchDataset& data, const std::string& domain,
               const TrainConfig& config, AdaptOptions options) {
  if (!model.shared_frozen()) {
    throw Error(ErrorCode::invalid_argument, "adapt requires a primed (frozen) core");
  }
  require_trainable_data(model, data);
  config.validate();
  if (options.resume) {
    DomainEntry& entry = model.domain(domain);
    if (entry.adagrad.empty()) {
      throw Error(ErrorCode::invalid_argument, "domain '" + domain + "' has no optimizer state to resume");
    }
    return run_counting_training(model, entry, data, domain, config, false);
  }
  if (model.has_domain(domain)) {
    if (!options.retrain) {
      throw Error(ErrorCode::domain_exists, "'" + domain + "' (pass retrain to start it over)");
    }
    model.remove_domain(domain);
  }
  DomainEntry& entry = model.register_domain(domain);
  return run_counting_training(model, entry, data, domain, config, false);
}

Prediction predict_grid(const CountingModel& model, const SceneFeatures& scene, std::string_view domain) {
  const Matrix out = model.forward(scene.features, domain, Mode::infer);
  Prediction p;
  p.grid.shape = scene.grid;
  p.grid.scene_id = scene.scene_id;
  p.grid.values.assign(out.data(), out.data() + out.size());
  p.raw_total = p.grid.sum();
  p.total = std::max(p.raw_total, 0.0);
  return p;
}

Prediction predict_image(const CountingModel& model, const FrozenExtractor& extractor,
                         const Scene& scene, std::string_view domain, int patch_size) {
  if (!model.has_domain(domain)) throw Error(ErrorCode::domain_not_found, "'" + std::string(domain) + "'");
  return predict_grid(model, extract_scene_features(extractor, scene, patch_size), domain);
}

Prediction predict_image(const CountingModel& model, const FrozenExtractor& extractor,
                         const Image& image, std::string_view domain, int patch_size) {
  Scene s;
  s.pixels = image;
  return predict_image(model, extractor, s, domain, patch_size);
}

}  // namespace countadapt
