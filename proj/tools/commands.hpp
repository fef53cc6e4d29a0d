// SPDX-License-Identifier: Apache-2.0
// Subcommand implementations behind the countadapt executable.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "countadapt/optim.hpp"

namespace countadapt::cli {

/// Where logs, the echoed config and loss curves go.
struct RunContext {
  std::filesystem::path run_dir = "run";
  std::string echoed_config;  // resolved settings, INI form
};

struct TrainOptions {
  double learning_rate = 0.1;
  double weight_decay = 1e-3;
  int iterations = 2000;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool paper_scale = false;  // 10000 iterations, batch 256 unless set explicitly

  TrainConfig resolve(bool iterations_set, bool batch_set) const;
};

/// Scenes come either from a dot-annotated dataset directory or a precomputed FTV1 file.
struct DataOptions {
  std::filesystem::path data;
  std::filesystem::path features;
  std::string split = "train";
  bool augment_hflip = false;
  std::filesystem::path save_features;
};

struct GenDataArgs {
  std::string spec;
  int count = 0;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int height = 200;
  int width = 200;
  int channels = 1;
  double val_fraction = 0.3;
};

struct PrimeArgs {
  DataOptions data;
  std::string domain;
  std::filesystem::path out;
  int feature_dim = 64;
  std::uint64_t extractor_seed = 0;
  std::string extractor_layers;  // empty: 5x5s2:8,5x5s2:16,5x5s2:<feature_dim>
  std::string activation = "relu";
  int patch_size = 50;
  int input_channels = 1;  // only consulted with precomputed features
  std::uint64_t model_seed = 0;
  TrainConfig train;
};

struct AdaptArgs {
  std::filesystem::path archive;
  std::filesystem::path out;  // empty: update in place
  DataOptions data;
  std::string domain;
  bool retrain = false;
  bool resume = false;
  TrainConfig train;
};

struct RefinerArgs {
  std::filesystem::path archive;
  std::filesystem::path out;
  DataOptions data;
  std::string domain;
  std::uint64_t init_seed = 0;
  bool resume = false;
  TrainConfig train;
};

struct ClassifierArgs {
  std::filesystem::path archive;
  std::filesystem::path out;
  std::vector<std::filesystem::path> data;
  std::vector<std::string> domains;  // empty: every domain found in the datasets
  std::string split = "train";
  TrainConfig train;  // batch_size is split evenly across classes
};

struct EvalArgs {
  std::filesystem::path archive;
  DataOptions data;
  std::string domain;
  bool refined = false;
};

struct PredictArgs {
  std::filesystem::path archive;
  std::filesystem::path image;
  std::string domain;
  bool auto_domain = false;
  bool refined = false;
  bool single_patch = false;
};

struct AuditArgs {
  std::filesystem::path archive;
};

struct GradCheckArgs {
  std::uint64_t seed = 0;
  double threshold = 1e-4;
};

int cmd_gen_data(const GenDataArgs& args, const RunContext& run);
int cmd_prime(const PrimeArgs& args, const RunContext& run);
int cmd_adapt(const AdaptArgs& args, const RunContext& run);
int cmd_train_refiner(const RefinerArgs& args, const RunContext& run);
int cmd_train_classifier(const ClassifierArgs& args, const RunContext& run);
int cmd_eval(const EvalArgs& args, const RunContext& run);
int cmd_predict(const PredictArgs& args, const RunContext& run);
int cmd_audit(const AuditArgs& args, const RunContext& run);
int cmd_grad_check(const GradCheckArgs& args, const RunContext& run);

}  // namespace countadapt::cli
