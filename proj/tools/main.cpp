// SPDX-License-Identifier: Apache-2.0
// countadapt: data generation, priming, adaptation, refinement, classification, evaluation.
#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "commands.hpp"
#include "countadapt/common.hpp"
#include "countadapt/refiner.hpp"

namespace {

using namespace countadapt;
using namespace countadapt::cli;

struct TrainFlags {
  TrainOptions opts;
  CLI::Option* iterations = nullptr;
  CLI::Option* batch = nullptr;

  TrainConfig resolve() const { return opts.resolve(iterations->count() > 0, batch->count() > 0); }
};

void add_train_flags(CLI::App* sub, TrainFlags& f, int default_iterations, int default_batch,
                     double default_lr = 0.1) {
  f.opts.learning_rate = default_lr;
  f.opts.iterations = default_iterations;
  f.opts.batch_size = default_batch;
  sub->add_option("--lr", f.opts.learning_rate, "AdaGrad learning rate")->capture_default_str();
  sub->add_option("--weight-decay", f.opts.weight_decay, "L2 decay on weights and adapter gamma")->capture_default_str();
  f.iterations = sub->add_option("--iterations", f.opts.iterations, "Training iterations")->capture_default_str();
  f.batch = sub->add_option("--batch", f.opts.batch_size, "Mini-batch size")->capture_default_str();
  sub->add_option("--seed", f.opts.seed, "Seed for batch order and initialization")->capture_default_str();
  sub->add_flag("--paper-scale", f.opts.paper_scale, "10000 iterations at batch 256 unless overridden");
}

void add_data_flags(CLI::App* sub, DataOptions& d, const std::string& default_split) {
  d.split = default_split;
  sub->add_option("--data", d.data, "Dataset directory (manifest.csv, scenes/, annotations/)");
  sub->add_option("--features", d.features, "Precomputed FTV1 feature file (with .csv sidecar)");
  sub->add_option("--split", d.split, "Dataset split to use")->capture_default_str();
  sub->add_flag("--hflip", d.augment_hflip, "Add horizontally mirrored copies of every scene");
  sub->add_option("--save-features", d.save_features, "Also write the extracted features as FTV1");
}

std::string echo_config(const CLI::App& app, const CLI::App* sub) {
  // The root dump also lists every subcommand's keys with a dotted prefix; keep the root keys
  // and write the active subcommand as its own section.
  std::istringstream root(app.config_to_str(true, false));
  std::string out;
  for (std::string line; std::getline(root, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && line.substr(0, eq).find('.') == std::string::npos) out += line + '\n';
  }
  out += "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-domain object counting with residual adapters"};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "INI config with one [section] per subcommand");
  RunContext run;
  app.add_option("--run-dir", run.run_dir, "Directory for logs, loss curves, reports and the echoed config")
      ->capture_default_str();

  GenDataArgs gen;
  auto* s_gen = app.add_subcommand("gen_data", "Generate a synthetic dot-annotated dataset");
  s_gen->alias("gen-data");
  s_gen->add_option("spec", gen.spec, "Built-in domain name or key=value domain spec file")->required();
  s_gen->add_option("count", gen.count, "Number of scenes")->required();
  s_gen->add_option("out", gen.out, "Output directory")->required();
  s_gen->add_option("seed", gen.seed, "Generation seed")->required();
  s_gen->add_option("--height", gen.height, "Scene height in pixels")->capture_default_str();
  s_gen->add_option("--width", gen.width, "Scene width in pixels")->capture_default_str();
  s_gen->add_option("--channels", gen.channels, "1 (grayscale) or 3 (RGB)")->capture_default_str();
  s_gen->add_option("--val-fraction", gen.val_fraction, "Fraction of scenes in the val split")->capture_default_str();

  PrimeArgs prime_args;
  TrainFlags prime_train;
  auto* s_prime = app.add_subcommand("prime", "Train the shared core and the first domain's adapters");
  add_data_flags(s_prime, prime_args.data, "train");
  s_prime->add_option("--domain", prime_args.domain, "Priming domain name")->required();
  s_prime->add_option("--out", prime_args.out, "Archive directory to create")->required();
  s_prime->add_option("--feature-dim", prime_args.feature_dim, "Extractor output width N")->capture_default_str();
  s_prime->add_option("--extractor-seed", prime_args.extractor_seed, "Seed of the frozen extractor")->capture_default_str();
  s_prime->add_option("--extractor-layers", prime_args.extractor_layers, "e.g. 5x5s2:8,5x5s2:16,5x5s2:64");
  s_prime->add_option("--activation", prime_args.activation, "Extractor nonlinearity: relu or identity")->capture_default_str();
  s_prime->add_option("--patch", prime_args.patch_size, "Patch size in pixels")->capture_default_str();
  s_prime->add_option("--input-channels", prime_args.input_channels, "Image channels when using --features")->capture_default_str();
  s_prime->add_option("--model-seed", prime_args.model_seed, "Seed of the head initialization")->capture_default_str();
  add_train_flags(s_prime, prime_train, 2000, 64);

  AdaptArgs adapt_args;
  TrainFlags adapt_train;
  auto* s_adapt = app.add_subcommand("adapt", "Train a fresh adapter set for a new domain on the frozen core");
  s_adapt->add_option("--archive", adapt_args.archive, "Archive directory")->required();
  s_adapt->add_option("--out", adapt_args.out, "Write the result here instead of updating in place");
  add_data_flags(s_adapt, adapt_args.data, "train");
  s_adapt->add_option("--domain", adapt_args.domain, "New domain name")->required();
  s_adapt->add_flag("--retrain", adapt_args.retrain, "Replace an existing domain's adapters");
  s_adapt->add_flag("--resume", adapt_args.resume, "Continue an existing domain from its optimizer state");
  add_train_flags(s_adapt, adapt_train, 2000, 64);

  RefinerArgs ref_args;
  TrainFlags ref_train;
  auto* s_ref = app.add_subcommand("train_refiner", "Train a domain's estimate-grid refiner");
  s_ref->alias("train-refiner");
  s_ref->add_option("--archive", ref_args.archive, "Archive directory")->required();
  s_ref->add_option("--out", ref_args.out, "Write the result here instead of updating in place");
  add_data_flags(s_ref, ref_args.data, "train");
  s_ref->add_option("--domain", ref_args.domain, "Registered domain")->required();
  s_ref->add_option("--init-seed", ref_args.init_seed, "Seed of the refiner initialization")->capture_default_str();
  s_ref->add_flag("--resume", ref_args.resume, "Continue from the stored refiner and optimizer state");
  add_train_flags(s_ref, ref_train, 2000, 16, kRefinerLearningRate);

  ClassifierArgs cls_args;
  TrainFlags cls_train;
  auto* s_cls = app.add_subcommand("train_classifier", "Train a domain classifier head on the frozen core");
  s_cls->alias("train-classifier");
  s_cls->add_option("--archive", cls_args.archive, "Archive directory")->required();
  s_cls->add_option("--out", cls_args.out, "Write the result here instead of updating in place");
  s_cls->add_option("--data", cls_args.data, "Dataset directories (classes come from the manifest domain column)")->required();
  s_cls->add_option("--domains", cls_args.domains, "Class list and order (default: order of appearance)")->delimiter(',');
  s_cls->add_option("--split", cls_args.split, "Dataset split to use")->capture_default_str();
  add_train_flags(s_cls, cls_train, 2000, 64);

  EvalArgs eval_args;
  auto* s_eval = app.add_subcommand("eval", "MAE and MSE of one domain on a dataset split");
  s_eval->add_option("--archive", eval_args.archive, "Archive directory")->required();
  add_data_flags(s_eval, eval_args.data, "val");
  s_eval->add_option("--domain", eval_args.domain, "Registered domain")->required();
  s_eval->add_flag("--refined", eval_args.refined, "Sum the refined grid instead of the raw one");

  PredictArgs pred_args;
  auto* s_pred = app.add_subcommand("predict", "Count objects in one image");
  s_pred->add_option("--archive", pred_args.archive, "Archive directory")->required();
  s_pred->add_option("image", pred_args.image, "Image file (.pgm, .ppm or .png)")->required();
  auto* o_domain = s_pred->add_option("--domain", pred_args.domain, "Domain to count with");
  auto* o_auto = s_pred->add_flag("--auto-domain", pred_args.auto_domain, "Pick the domain with the classifier");
  o_domain->excludes(o_auto);
  s_pred->add_flag("--refined", pred_args.refined, "Apply the domain's refiner");
  s_pred->add_flag("--single-patch", pred_args.single_patch, "Classify the resized whole image instead of voting");

  AuditArgs audit_args;
  auto* s_audit = app.add_subcommand("audit", "Parameter counts per component");
  s_audit->add_option("--archive", audit_args.archive, "Archive directory")->required();

  GradCheckArgs gc_args;
  auto* s_gc = app.add_subcommand("grad_check", "Finite-difference gradient checks");
  s_gc->alias("grad-check");
  s_gc->add_option("seed", gc_args.seed, "Seed of the random configurations")->capture_default_str();
  s_gc->add_option("--threshold", gc_args.threshold, "Maximum accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  run.echoed_config = echo_config(app, sub);
  try {
    if (sub == s_gen) return cmd_gen_data(gen, run);
    if (sub == s_prime) {
      prime_args.train = prime_train.resolve();
      return cmd_prime(prime_args, run);
    }
    if (sub == s_adapt) {
      adapt_args.train = adapt_train.resolve();
      return cmd_adapt(adapt_args, run);
    }
    if (sub == s_ref) {
      ref_args.train = ref_train.resolve();
      return cmd_train_refiner(ref_args, run);
    }
    if (sub == s_cls) {
      cls_args.train = cls_train.resolve();
      return cmd_train_classifier(cls_args, run);
    }
    if (sub == s_eval) return cmd_eval(eval_args, run);
    if (sub == s_pred) return cmd_predict(pred_args, run);
    if (sub == s_audit) return cmd_audit(audit_args, run);
    if (sub == s_gc) return cmd_grad_check(gc_args, run);
  } catch (const countadapt::Error& e) {
    std::cerr << "countadapt: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "countadapt: error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
