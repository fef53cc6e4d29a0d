// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "countadapt/classifier.hpp"
#include "countadapt/datagen.hpp"
#include "countadapt/eval.hpp"
#include "countadapt/features.hpp"
#include "countadapt/gradcheck.hpp"
#include "countadapt/persistence.hpp"
#include "countadapt/refiner.hpp"
#include "countadapt/regressor.hpp"

namespace countadapt::cli {
namespace fs = std::filesystem;

namespace {

class RunLog {
 public:
  explicit RunLog(const RunContext& run) {
    std::error_code ec;
    fs::create_directories(run.run_dir, ec);
    if (ec) throw Error(ErrorCode::io_error, "cannot create run directory " + run.run_dir.string());
    std::ofstream cfg(run.run_dir / "config.ini", std::ios::trunc);
    cfg << run.echoed_config;
    if (!cfg) throw Error(ErrorCode::io_error, "cannot write " + (run.run_dir / "config.ini").string());
    log_.open(run.run_dir / "run.log", std::ios::app);
    log_ << "--- resolved config ---\n" << run.echoed_config << "---\n";
  }

  void line(const std::string& msg) {
    std::cout << msg << '\n';
    log_ << msg << '\n';
  }

 private:
  std::ofstream log_;
};

/// step,loss for step 0, every 100th step, and the final step.
void write_loss_csv(const fs::path& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < log.loss.size(); ++i) {
    if (i % 100 == 0 || i + 1 == log.loss.size()) out << i << ',' << log.loss[i] << '\n';
  }
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(precision) << v;
  return ss.str();
}

std::vector<Scene> load_scenes(const DataOptions& opt) {
  if (opt.data.empty()) throw Error(ErrorCode::invalid_argument, "a dataset directory (--data) is required");
  if (!fs::is_directory(opt.data)) throw Error(ErrorCode::io_error, "no dataset directory at " + opt.data.string());
  std::vector<Scene> scenes = load_dot_dataset(opt.data, opt.split);
  if (scenes.empty()) throw Error(ErrorCode::invalid_argument, "split '" + opt.split + "' of " + opt.data.string() + " is empty");
  if (opt.augment_hflip) scenes = augment_hflip(scenes);
  return scenes;
}

std::vector<SceneFeatures> load_scene_features(const DataOptions& opt, const FrozenExtractor& extractor,
                                               int patch_size, RunLog& log) {
  std::vector<SceneFeatures> out;
  if (!opt.features.empty()) {
    if (!opt.data.empty()) throw Error(ErrorCode::invalid_argument, "--data and --features are mutually exclusive");
    const FeatureFile file = load_precomputed(opt.features, extractor.output_dim());
    out = scenes_from_feature_file(file);
    log.line("loaded " + std::to_string(file.features.rows()) + " precomputed patch features from " + opt.features.string());
  } else {
    const auto scenes = load_scenes(opt);
    out = extract_dataset_features(extractor, scenes, patch_size);
    log.line("extracted features for " + std::to_string(scenes.size()) + " scenes (split " + opt.split + ")");
  }
  if (!opt.save_features.empty()) {
    const FeatureFile file = to_feature_file(out);
    save_features(opt.save_features, file.features, file.records);
    log.line("wrote features to " + opt.save_features.string());
  }
  return out;
}

ModelArchive open_archive(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::io_error, "no archive at " + dir.string());
  return load_archive(dir);
}

/// Writes next to the destination first so a failed save never leaves a half-written archive.
void commit_archive(const ModelArchive& archive, const fs::path& dest) {
  fs::path target = dest;
  if (target.filename().empty()) target = target.parent_path();
  const fs::path staging = target.string() + ".partial";
  fs::remove_all(staging);
  save_archive(archive, staging);
  fs::remove_all(target);
  fs::rename(staging, target);
}

const fs::path& output_for(const fs::path& archive, const fs::path& out) { return out.empty() ? archive : out; }

void require_domain(const CountingModel& model, const std::string& domain) {
  if (!model.has_domain(domain)) {
    throw Error(ErrorCode::domain_not_found, "domain '" + domain + "' is not registered in this archive");
  }
}

SyntheticDomainSpec load_spec_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open domain spec " + path.string());
  SyntheticDomainSpec spec;
  spec.name = path.stem().string();
  auto parse_shape = [](const std::string& v) {
    for (BlobShape s : {BlobShape::gaussian_spot, BlobShape::ring, BlobShape::rectangle, BlobShape::crescent}) {
      if (to_string(s) == v) return s;
    }
    throw Error(ErrorCode::invalid_argument, "unknown shape '" + v + "'");
  };
  auto parse_background = [](const std::string& v) {
    for (Background b : {Background::flat, Background::gradient, Background::textured_noise}) {
      if (to_string(b) == v) return b;
    }
    throw Error(ErrorCode::invalid_argument, "unknown background '" + v + "'");
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::format_error, path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "name") spec.name = val;
      else if (key == "shape") spec.shape = parse_shape(val);
      else if (key == "radius_min") spec.radius_min = std::stod(val);
      else if (key == "radius_max") spec.radius_max = std::stod(val);
      else if (key == "intensity_min") spec.intensity_min = std::stod(val);
      else if (key == "intensity_max") spec.intensity_max = std::stod(val);
      else if (key == "background") spec.background = parse_background(val);
      else if (key == "background_level") spec.background_level = std::stod(val);
      else if (key == "noise_sigma") spec.noise_sigma = std::stod(val);
      else if (key == "count_mean") spec.counts.mean = std::stod(val);
      else if (key == "count_std") spec.counts.stddev = std::stod(val);
      else if (key == "count_min") spec.counts.min = std::stoi(val);
      else if (key == "count_max") spec.counts.max = std::stoi(val);
      else throw Error(ErrorCode::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::format_error, path.string() + ":" + std::to_string(lineno) + ": bad value for " + key);
    }
  }
  spec.validate();
  return spec;
}

SyntheticDomainSpec resolve_spec(const std::string& name_or_path) {
  for (const auto& s : builtin_domains()) {
    if (s.name == name_or_path) return s;
  }
  if (fs::is_regular_file(name_or_path)) return load_spec_file(name_or_path);
  throw Error(ErrorCode::domain_not_found, "'" + name_or_path + "' is neither a built-in domain nor a spec file");
}

}  // namespace

TrainConfig TrainOptions::resolve(bool iterations_set, bool batch_set) const {
  TrainConfig c = paper_scale ? TrainConfig::paper_defaults() : TrainConfig{};
  c.learning_rate = learning_rate;
  c.weight_decay = weight_decay;
  c.seed = seed;
  if (!paper_scale || iterations_set) c.iterations = iterations;
  if (!paper_scale || batch_set) c.batch_size = batch_size;
  c.validate();
  return c;
}

int cmd_gen_data(const GenDataArgs& a, const RunContext& run) {
  const SyntheticDomainSpec spec = resolve_spec(a.spec);
  if (a.count <= 0) throw Error(ErrorCode::invalid_argument, "count must be positive");
  RunLog log(run);
  const auto entries = gen_dataset(spec, a.count, a.height, a.width, a.seed, a.val_fraction, a.channels);
  write_dot_dataset(a.out, entries);
  const auto val = std::count_if(entries.begin(), entries.end(), [](const DatasetEntry& e) { return e.split == "val"; });
  log.line("wrote " + std::to_string(entries.size()) + " " + spec.name + " scenes (" + std::to_string(val) +
           " val) to " + a.out.string());
  return 0;
}

int cmd_prime(const PrimeArgs& a, const RunContext& run) {
  require_valid_domain_id(a.domain);
  RunLog log(run);
  FrozenExtractorSpec ex = FrozenExtractorSpec::desk_default(a.feature_dim, a.extractor_seed, a.input_channels);
  if (!a.extractor_layers.empty()) ex.layers = FrozenExtractorSpec::parse_layers(a.extractor_layers);
  if (a.activation == "identity") {
    ex.nonlinearity = Nonlinearity::identity;
  } else if (a.activation != "relu") {
    throw Error(ErrorCode::invalid_argument, "activation must be relu or identity");
  }
  if (a.data.features.empty()) {
    const auto probe = load_scenes(a.data);
    ex.input_channels = probe.front().pixels.channels;
  }
  ex.validate();
  const FrozenExtractor extractor = build_frozen_extractor(ex);
  if (a.patch_size < extractor.footprint()) {
    throw Error(ErrorCode::invalid_argument, "patch size " + std::to_string(a.patch_size) +
                                                 " is smaller than the extractor footprint " + std::to_string(extractor.footprint()));
  }
  const auto feats = load_scene_features(a.data, extractor, a.patch_size, log);

  ModelArchive archive{CountingModel(extractor.output_dim(), a.model_seed), ex, a.patch_size, std::nullopt};
  const TrainLog tl = prime(archive.model, to_patch_dataset(feats), a.domain, a.train);
  write_loss_csv(run.run_dir / ("loss_prime_" + a.domain + ".csv"), tl);
  commit_archive(archive, a.out);
  log.line("primed '" + a.domain + "' for " + std::to_string(a.train.iterations) + " iterations, final loss " +
           fmt(tl.loss.back(), 6) + "; archive " + a.out.string());
  return 0;
}

int cmd_adapt(const AdaptArgs& a, const RunContext& run) {
  require_valid_domain_id(a.domain);
  ModelArchive archive = open_archive(a.archive);
  RunLog log(run);
  const FrozenExtractor extractor = build_frozen_extractor(archive.extractor);
  const auto feats = load_scene_features(a.data, extractor, archive.patch_size, log);
  const TrainLog tl = adapt(archive.model, to_patch_dataset(feats), a.domain, a.train, {a.retrain, a.resume});
  write_loss_csv(run.run_dir / ("loss_adapt_" + a.domain + ".csv"), tl);
  const fs::path& out = output_for(a.archive, a.out);
  commit_archive(archive, out);
  log.line("adapted '" + a.domain + "' (" + std::to_string(archive.model.domain(a.domain).steps_done) +
           " steps total), final loss " + fmt(tl.loss.empty() ? 0.0 : tl.loss.back(), 6) + "; archive " + out.string());
  return 0;
}

int cmd_train_refiner(const RefinerArgs& a, const RunContext& run) {
  ModelArchive archive = open_archive(a.archive);
  require_domain(archive.model, a.domain);
  RunLog log(run);
  const FrozenExtractor extractor = build_frozen_extractor(archive.extractor);
  const auto feats = load_scene_features(a.data, extractor, archive.patch_size, log);
  const auto pairs = build_refinement_pairs(archive.model, feats, a.domain);

  DomainEntry& entry = archive.model.domain(a.domain);
  RefinementNet net;
  RefinerTrainingState state;
  if (a.resume && entry.refiner && entry.refiner_state) {
    net = *entry.refiner;
    state = *entry.refiner_state;
  } else {
    if (a.resume) throw Error(ErrorCode::invalid_argument, "domain '" + a.domain + "' has no refiner state to resume");
    net = RefinementNet::create_default(a.init_seed);
  }
  const TrainLog tl = train_refiner(net, pairs, a.train, &state);
  entry.refiner = std::move(net);
  entry.refiner_state = std::move(state);
  write_loss_csv(run.run_dir / ("loss_refiner_" + a.domain + ".csv"), tl);
  const fs::path& out = output_for(a.archive, a.out);
  commit_archive(archive, out);
  log.line("trained refiner for '" + a.domain + "' on " + std::to_string(pairs.size()) + " grids, final loss " +
           fmt(tl.loss.empty() ? 0.0 : tl.loss.back(), 6) + "; archive " + out.string());
  return 0;
}

int cmd_train_classifier(const ClassifierArgs& a, const RunContext& run) {
  ModelArchive archive = open_archive(a.archive);
  if (a.data.empty()) throw Error(ErrorCode::invalid_argument, "at least one dataset (--data) is required");
  RunLog log(run);
  const FrozenExtractor extractor = build_frozen_extractor(archive.extractor);

  std::vector<std::string> order;
  std::map<std::string, std::vector<Scene>> by_domain;
  for (const auto& dir : a.data) {
    DataOptions opt;
    opt.data = dir;
    opt.split = a.split;
    for (auto& s : load_scenes(opt)) {
      if (!by_domain.contains(s.domain)) order.push_back(s.domain);
      by_domain[s.domain].push_back(std::move(s));
    }
  }
  const std::vector<std::string> domains = a.domains.empty() ? order : a.domains;
  if (domains.size() < 2) throw Error(ErrorCode::invalid_argument, "a classifier needs at least two domains");
  std::vector<std::vector<SceneFeatures>> per_domain;
  for (const auto& d : domains) {
    auto it = by_domain.find(d);
    if (it == by_domain.end()) throw Error(ErrorCode::domain_not_found, "no scenes of domain '" + d + "' in the datasets");
    per_domain.push_back(extract_dataset_features(extractor, it->second, archive.patch_size));
    log.line("class '" + d + "': " + std::to_string(it->second.size()) + " scenes");
  }
  TrainLog tl;
  archive.classifier = train_classifier(archive.model, make_classifier_dataset(domains, per_domain), a.train, &tl);
  write_loss_csv(run.run_dir / "loss_classifier.csv", tl);
  const fs::path& out = output_for(a.archive, a.out);
  commit_archive(archive, out);
  log.line("trained " + std::to_string(domains.size()) + "-way classifier, final loss " +
           fmt(tl.loss.empty() ? 0.0 : tl.loss.back(), 6) + "; archive " + out.string());
  return 0;
}

int cmd_eval(const EvalArgs& a, const RunContext& run) {
  const ModelArchive archive = open_archive(a.archive);
  require_domain(archive.model, a.domain);
  const DomainEntry& entry = archive.model.domain(a.domain);
  if (a.refined && !entry.refiner) throw Error(ErrorCode::invalid_argument, "domain '" + a.domain + "' has no refiner");
  RunLog log(run);
  const FrozenExtractor extractor = build_frozen_extractor(archive.extractor);
  const auto feats = load_scene_features(a.data, extractor, archive.patch_size, log);
  const EvalReport report = evaluate(archive.model, a.refined ? &*entry.refiner : nullptr, feats, a.domain, a.data.split);
  const std::string stem = "eval_" + a.domain + "_" + a.data.split + (a.refined ? "_refined" : "");
  report.write_csv(run.run_dir / (stem + ".csv"));
  std::ofstream(run.run_dir / (stem + ".txt")) << report.summary();
  log.line(report.summary());
  return 0;
}

int cmd_predict(const PredictArgs& a, const RunContext& run) {
  if (a.auto_domain == !a.domain.empty()) {
    throw Error(ErrorCode::invalid_argument, "give exactly one of --domain or --auto-domain");
  }
  const ModelArchive archive = open_archive(a.archive);
  if (!fs::is_regular_file(a.image)) throw Error(ErrorCode::io_error, "no image at " + a.image.string());
  RunLog log(run);
  const FrozenExtractor extractor = build_frozen_extractor(archive.extractor);
  Scene scene;
  scene.id = a.image.stem().string();
  scene.pixels = read_image(a.image);

  std::string domain = a.domain;
  if (a.auto_domain) {
    if (!archive.classifier) throw Error(ErrorCode::invalid_argument, "archive has no domain classifier");
    const auto cls = classify_scene(archive.model, *archive.classifier, extractor, scene, archive.patch_size,
                                    a.single_patch ? SceneClassifyMode::single_patch : SceneClassifyMode::patch_vote);
    domain = cls.domain;
    std::ostringstream ss;
    ss << "classified as '" << domain << "' (vote shares:";
    for (std::size_t i = 0; i < cls.vote_shares.size(); ++i) {
      ss << ' ' << archive.classifier->domains[i] << '=' << fmt(cls.vote_shares[i], 3);
    }
    ss << ')';
    log.line(ss.str());
  }
  require_domain(archive.model, domain);
  Prediction p = predict_image(archive.model, extractor, scene, domain, archive.patch_size);
  EstimateGrid grid = p.grid;
  double total = p.total;
  if (a.refined) {
    const DomainEntry& entry = archive.model.domain(domain);
    if (!entry.refiner) throw Error(ErrorCode::invalid_argument, "domain '" + domain + "' has no refiner");
    grid = refine(*entry.refiner, p.grid);
    total = std::max(grid.sum(), 0.0);
  }
  std::ostringstream ss;
  ss << "grid " << grid.shape.rows << "x" << grid.shape.cols << " (domain " << domain << (a.refined ? ", refined" : "") << ")\n";
  for (int r = 0; r < grid.shape.rows; ++r) {
    for (int c = 0; c < grid.shape.cols; ++c) ss << (c ? " " : "") << fmt(grid.at(r, c), 3);
    ss << '\n';
  }
  ss << "total " << fmt(total, 3);
  log.line(ss.str());
  return 0;
}

int cmd_audit(const AuditArgs& a, const RunContext& run) {
  const ModelArchive archive = open_archive(a.archive);
  RunLog log(run);
  const ParamsAudit audit = params_audit(archive.model, archive.classifier ? &*archive.classifier : nullptr);
  std::ofstream(run.run_dir / "audit.txt") << audit.to_text();
  log.line(audit.to_text());
  return 0;
}

int cmd_grad_check(const GradCheckArgs& a, const RunContext& run) {
  RunLog log(run);
  const auto results = run_grad_checks(a.seed);
  std::ofstream csv(run.run_dir / "grad_check.csv");
  csv << "component,checked,skipped_kinks,max_rel_error,max_abs_error\n" << std::setprecision(6);
  double worst = 0.0;
  for (const auto& r : results) {
    csv << r.component << ',' << r.checked << ',' << r.skipped_kinks << ',' << r.max_rel_error << ',' << r.max_abs_error << '\n';
    std::ostringstream ss;
    ss << std::left << std::setw(16) << r.component << " max rel. error " << std::scientific << std::setprecision(3)
       << r.max_rel_error << "  (" << r.checked << " entries, " << r.skipped_kinks << " skipped at kinks)";
    log.line(ss.str());
    worst = std::max(worst, r.max_rel_error);
  }
  std::ostringstream ss;
  ss << "overall max rel. error " << std::scientific << std::setprecision(3) << worst
     << (worst < a.threshold ? " < " : " >= ") << a.threshold;
  log.line(ss.str());
  return worst < a.threshold ? 0 : 1;
}

}  // namespace countadapt::cli
