// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "countadapt/classifier.hpp"
#include "countadapt/refiner.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt {

/// Mean absolute error between per-image totals.
double mae(std::span<const double> gts, std::span<const double> preds);

/// Root-mean-squared error. Tables conventionally label this column "MSE".
double rmse(std::span<const double> gts, std::span<const double> preds);

struct EvalReport {
  std::string domain;
  std::string split;
  bool refined = false;
  std::vector<std::string> scene_ids;
  std::vector<double> gts;
  std::vector<double> preds;  // clamped at 0
  double mae = 0.0;
  double mse = 0.0;  // root-mean-squared, see rmse()

  /// Columns: scene_id,gt,pred,abs_err
  void write_csv(const std::filesystem::path& path) const;
  std::string summary() const;
};

/// Scene totals come from predict_grid; with a refiner the refined grid is summed instead.
EvalReport evaluate(const CountingModel& model, const RefinementNet* refiner,
                    std::span<const SceneFeatures> scenes, const std::string& domain,
                    const std::string& split = "val");

EvalReport evaluate(const CountingModel& model, const RefinementNet* refiner,
                    const FrozenExtractor& extractor, std::span<const Scene> scenes,
                    const std::string& domain, int patch_size, const std::string& split = "val");

/// Reference figures the audit compares against.
struct PublishedCounts {
  double shared = 330000;
  double adapter_ratio = 0.05;
  double refiner = 4950;
  double marginal = 20000;
};

struct DomainAudit {
  std::string domain;
  std::size_t adapter_params = 0;
  double adapter_ratio = 0.0;  // adapter_params / shared trainable
  std::size_t refiner_params = 0;
  bool has_refiner = false;
  std::size_t marginal_params = 0;  // adapters + refiner
};

struct ParamsAudit {
  int feature_dim = 0;
  std::size_t shared_params = 0;
  std::size_t expected_adapter_params = 0;  // 3 · (N + 513)
  std::size_t default_refiner_params = 0;   // closed form for 1-16-16-16-1
  std::vector<DomainAudit> domains;
  std::optional<std::size_t> classifier_params;
  PublishedCounts published;
  std::vector<std::string> deviations;

  std::string to_text() const;
};

ParamsAudit params_audit(const CountingModel& model, const DomainClassifierHead* classifier = nullptr);

}  // namespace countadapt
