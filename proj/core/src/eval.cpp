// SPDX-License-Identifier: Apache-2.0
#include "countadapt/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "csv.hpp"

namespace countadapt {
namespace {

void check_lengths(std::span<const double> gts, std::span<const double> preds) {
  if (gts.size() != preds.size()) throw Error(ErrorCode::dimension_mismatch, "metric inputs differ in length");
  if (gts.empty()) throw Error(ErrorCode::invalid_argument, "metric over an empty set");
}

}  // namespace

double mae(std::span<const double> gts, std::span<const double> preds) {
  check_lengths(gts, preds);
  double s = 0.0;
  for (std::size_t i = 0; i < gts.size(); ++i) s += std::abs(gts[i] - preds[i]);
  return s / static_cast<double>(gts.size());
}

double rmse(std::span<const double> gts, std::span<const double> preds) {
  check_lengths(gts, preds);
  double s = 0.0;
  for (std::size_t i = 0; i < gts.size(); ++i) s += (gts[i] - preds[i]) * (gts[i] - preds[i]);
  return std::sqrt(s / static_cast<double>(gts.size()));
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  out << "scene_id,gt,pred,abs_err\n";
  for (std::size_t i = 0; i < gts.size(); ++i) {
    out << scene_ids[i] << ',' << csv::format(gts[i]) << ',' << csv::format(preds[i]) << ','
        << csv::format(std::abs(gts[i] - preds[i])) << '\n';
  }
  if (!out) throw Error(ErrorCode::io_error, "short write to " + path.string());
}

std::string EvalReport::summary() const {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4);
  ss << "domain   " << domain << '\n'
     << "split    " << split << '\n'
     << "refined  " << (refined ? "yes" : "no") << '\n'
     << "scenes   " << gts.size() << '\n'
     << "MAE      " << mae << '\n'
     << "MSE      " << mse << "  (root-mean-squared)\n";
  return ss.str();
}

EvalReport evaluate(const CountingModel& model, const RefinementNet* refiner,
                    std::span<const SceneFeatures> scenes, const std::string& domain,
                    const std::string& split) {
  EvalReport r;
  r.domain = domain;
  r.split = split;
  r.refined = refiner != nullptr;
  r.scene_ids.resize(scenes.size());
  r.gts.resize(scenes.size());
  r.preds.resize(scenes.size());
  (void)model.domain(domain);
  parallel_for(scenes.size(), [&](std::size_t i) {
    const Prediction p = predict_grid(model, scenes[i], domain);
    const double total = refiner ? refine(*refiner, p.grid).sum() : p.raw_total;
    r.scene_ids[i] = scenes[i].scene_id;
    r.gts[i] = scenes[i].gt_total;
    r.preds[i] = std::max(total, 0.0);
  });
  r.mae = mae(r.gts, r.preds);
  r.mse = rmse(r.gts, r.preds);
  return r;
}

EvalReport evaluate(const CountingModel& model, const RefinementNet* refiner,
                    const FrozenExtractor& extractor, std::span<const Scene> scenes,
                    const std::string& domain, int patch_size, const std::string& split) {
  const auto feats = extract_dataset_features(extractor, scenes, patch_size);
  return evaluate(model, refiner, feats, domain, split);
}

ParamsAudit params_audit(const CountingModel& model, const DomainClassifierHead* classifier) {
  ParamsAudit a;
  a.feature_dim = model.feature_dim();
  a.shared_params = model.shared_param_count();
  a.expected_adapter_params = 3 * static_cast<std::size_t>(model.feature_dim() + 513);
  a.default_refiner_params = refiner_param_count(RefinementNet::create_default(0));
  for (const auto& name : model.domain_names()) {
    const DomainEntry& e = model.domain(name);
    DomainAudit d;
    d.domain = name;
    d.adapter_params = adapter_param_count(e.adapters);
    d.adapter_ratio = static_cast<double>(d.adapter_params) / static_cast<double>(a.shared_params);
    d.has_refiner = e.refiner.has_value();
    d.refiner_params = d.has_refiner ? refiner_param_count(*e.refiner) : 0;
    d.marginal_params = d.adapter_params + d.refiner_params;
    a.domains.push_back(d);
  }
  if (classifier) a.classifier_params = classifier->trainable_param_count();

  auto note = [&](const std::string& what, double measured, double published) {
    if (measured != published) {
      std::ostringstream ss;
      ss << what << ": measured " << measured << ", published " << published;
      a.deviations.push_back(ss.str());
    }
  };
  note("shared trainable parameters", static_cast<double>(a.shared_params), a.published.shared);
  note("refiner parameters (1-16-16-16-1, 3x3)", static_cast<double>(a.default_refiner_params),
       a.published.refiner);
  if (!a.domains.empty()) {
    const auto& d = a.domains.front();
    note("adapter/shared ratio", d.adapter_ratio, a.published.adapter_ratio);
    note("marginal parameters per domain (adapters + default refiner)",
         static_cast<double>(d.adapter_params + a.default_refiner_params), a.published.marginal);
  }
  return a;
}

std::string ParamsAudit::to_text() const {
  std::ostringstream ss;
  ss << "feature_dim                 " << feature_dim << '\n'
     << "shared trainable params     " << shared_params << '\n'
     << "adapter params per domain   " << expected_adapter_params << "  (3 x (N + 513))\n"
     << "refiner params (default)    " << default_refiner_params << '\n';
  if (classifier_params) ss << "classifier head params      " << *classifier_params << '\n';
  for (const auto& d : domains) {
    ss << "domain " << d.domain << ": adapters " << d.adapter_params << " (" << std::fixed
       << std::setprecision(2) << 100.0 * d.adapter_ratio << "% of shared)" << std::defaultfloat
       << ", refiner " << (d.has_refiner ? std::to_string(d.refiner_params) : std::string("none"))
       << ", marginal " << d.marginal_params << '\n';
  }
  ss << "deviations from published figures (reported, not enforced):\n";
  if (deviations.empty()) ss << "  none\n";
  for (const auto& dev : deviations) ss << "  - " << dev << '\n';
  return ss.str();
}

}  // namespace countadapt
