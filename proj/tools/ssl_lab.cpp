// ssl_lab: batch command-line front end for the representation-learning
// stack. Subcommands mirror the experimental pipeline: pretrain a siamese
// encoder, fine-tune or linear-probe a classifier from it, evaluate a
// checkpoint, and render loss-curve artifacts from run logs.
//
// Exit codes are stable API:
//   0 success, 2 input/config error, 3 representation collapse,
//   4 checkpoint incompatibility, 1 unexpected failure.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ssllab/checkpoint.hpp"
#include "ssllab/config.hpp"
#include "ssllab/curves.hpp"
#include "ssllab/train.hpp"

#ifdef SSLLAB_HAVE_CBLAS
extern "C" void openblas_set_num_threads(int);
#endif

namespace fs = std::filesystem;
using namespace ssllab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitCollapse = 3;
constexpr int kExitIncompatible = 4;

// Mirror run-log lines to stdout and the run directory's run.log.
class RunLog {
 public:
  void open(const fs::path& path) { file_.open(path, std::ios::trunc); }
  template <typename Fn>
  void line(Fn&& write) {
    write(std::cout);
    std::cout << "\n";
    if (file_) {
      write(file_);
      file_ << "\n";
      file_.flush();
    }
  }
  std::ostream* file_stream() { return file_ ? &file_ : nullptr; }

 private:
  std::ofstream file_;
};

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::string init;
  int64_t threads = 0;
  bool threads_given = false;
};

void add_common_flags(CLI::App* cmd, CommonArgs& a, bool with_init) {
  cmd->add_option("--config", a.config, "key=value run configuration file");
  cmd->add_option("--set", a.sets,
                  "override one config entry (key=value; repeatable)");
  cmd->add_option("--seed", a.seed, "override the run seed")
      ->each([&a](const std::string&) { a.seed_given = true; });
  cmd->add_option("--out", a.out, "output directory for run artifacts");
  if (with_init)
    cmd->add_option("--init", a.init,
                    "checkpoint path ('random' or empty = fresh weights)");
  cmd->add_option("--threads", a.threads, "BLAS worker threads (default 1)")
      ->each([&a](const std::string&) { a.threads_given = true; });
}

RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) apply_assignments(cfg, load_config_file(a.config));
  for (const std::string& kv : a.sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_assignment(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed_given) cfg.seed = a.seed;
  if (!a.out.empty()) cfg.out = a.out;
  if (a.threads_given) {
    cfg.threads = a.threads;
  } else if (const char* env = std::getenv("SSL_LAB_THREADS")) {
    cfg.threads = cfgdetail::to_int("SSL_LAB_THREADS", env);
  }
  finalize_config(cfg);
#ifdef SSLLAB_HAVE_CBLAS
  openblas_set_num_threads(static_cast<int>(cfg.threads));
#endif
  return cfg;
}

fs::path require_out_dir(const RunConfig& cfg) {
  if (cfg.out.empty())
    throw ConfigError("an output directory is required (--out or out = ...)");
  fs::create_directories(cfg.out);
  return fs::path(cfg.out);
}

/// Persist the fully resolved configuration. Every training command calls
/// this after validation but before the first training step, so a run
/// directory always tells the truth about what produced it.
void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream out(dir / "config.resolved", std::ios::trunc);
  out << render_config(cfg);
}

/// Append extra rows to a run's metrics CSV in the trainer's exact format.
void append_metric_row(const fs::path& csv, int64_t epoch, int64_t step,
                       const std::string& split, const std::string& metric,
                       double value, double lr) {
  std::ofstream out(csv, std::ios::app);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%s,%s,%.17g,%.17g\n",
                static_cast<long long>(epoch), static_cast<long long>(step),
                split.c_str(), metric.c_str(), value, lr);
  out << buf;
}

int cmd_pretrain(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  auto data = dataset_from_config<float>(cfg.dataset);
  const SiameseConfig sc = siamese_from_config(cfg);
  SiameseModel<float> model(sc, cfg.seed);  // validates head geometry

  const fs::path dir = require_out_dir(cfg);
  write_resolved_config(cfg, dir);
  RunLog log;
  log.open(dir / "run.log");
  log.line([&](std::ostream& o) {
    o << "pretrain: dataset " << cfg.dataset.kind << " (" << data.size()
      << " items), backbone " << cfg.backbone.family << ", threads "
      << cfg.threads;
  });

  const AugmentationPolicy pol = policy_from_config(cfg);
  const TrainConfig tc = train_from_config(cfg);
  const PretrainResult r = train_pretrain(model, sc, data, pol, tc,
                                          dir.string(), log.file_stream());
  log.line([&](std::ostream& o) {
    o << "pretrain done: final loss "
      << r.epoch_mean_loss.back() << ", representation_std "
      << r.final_representation_std << ", checkpoints " << r.final_checkpoint
      << " / " << r.best_checkpoint;
  });
  return kExitOk;
}

int run_supervised_command(const CommonArgs& args, Regime regime) {
  RunConfig cfg = resolve_config(args);
  auto data = dataset_from_config<float>(cfg.dataset);
  const int64_t classes = data.label_width();
  if (data.label_kind() == LabelKind::unlabeled)
    throw ValueError("supervised training needs a labeled dataset; " +
                     cfg.dataset.kind + " has no labels");

  ClassifierModel<float> model(cfg.backbone, classes, cfg.seed);

  const fs::path dir = require_out_dir(cfg);
  RunLog log;
  // Initialize the backbone from a pretraining checkpoint when requested.
  std::string provenance = "random initialization";
  if (!args.init.empty() && args.init != "random") {
    const LoadedCheckpoint<float> loaded = load_checkpoint<float>(args.init);
    if (loaded.header.backbone.family != cfg.backbone.family)
      throw IncompatibilityError(
          "checkpoint backbone family '" + loaded.header.backbone.family +
          "' does not match configured family '" + cfg.backbone.family + "'");
    loaded.load_subtree(model.backbone(), "backbone.");
    provenance = "backbone initialized from " + args.init + " (content hash " +
                 file_hash_hex(args.init) + ")";
  }

  write_resolved_config(cfg, dir);
  log.open(dir / "run.log");
  log.line([&](std::ostream& o) {
    o << regime_name(regime) << ": dataset " << cfg.dataset.kind << " ("
      << data.size() << " items, " << classes << " outputs), threads "
      << cfg.threads;
  });
  log.line([&](std::ostream& o) { o << provenance; });

  const TrainConfig tc = train_from_config(cfg);
  const AugmentationPolicy aug = supervised_policy(mix_seed(cfg.seed, 0x54DL));
  // Fine-tuning uses the light crop+flip recipe; probing trains the head on
  // unaugmented frozen features.
  const AugmentationPolicy* aug_ptr =
      regime == Regime::finetune ? &aug : nullptr;
  const SupervisedResult r = train_supervised(model, data, tc, regime, aug_ptr,
                                              dir.string(), log.file_stream());
  log.line([&](std::ostream& o) {
    o << regime_name(regime) << " done: best val metric " << r.best_val_metric
      << " (epoch " << r.best_epoch << "), checkpoints " << r.final_checkpoint
      << " / " << r.best_checkpoint;
  });

  // Final held-out evaluation when a test dataset is configured.
  if (!cfg.test_dataset.kind.empty()) {
    auto test = dataset_from_config<float>(cfg.test_dataset, "test_dataset");
    const EvalReport rep = evaluate_classifier(model, test);
    const fs::path csv = dir / "metrics.csv";
    const int64_t last_epoch = cfg.train.epochs - 1;
    if (rep.kind == LabelKind::single_label) {
      append_metric_row(csv, last_epoch, r.applied_steps, "test", "accuracy",
                        rep.accuracy, 0.0);
      log.line([&](std::ostream& o) { o << "test accuracy " << rep.accuracy; });
    } else {
      append_metric_row(csv, last_epoch, r.applied_steps, "test",
                        "macro_accuracy", rep.multi.macro_accuracy, 0.0);
      append_metric_row(csv, last_epoch, r.applied_steps, "test",
                        "micro_accuracy", rep.multi.micro_accuracy, 0.0);
      append_metric_row(csv, last_epoch, r.applied_steps, "test", "macro_auc",
                        rep.multi.macro_auc, 0.0);
      append_metric_row(csv, last_epoch, r.applied_steps, "test", "micro_auc",
                        rep.multi.micro_auc, 0.0);
      log.line([&](std::ostream& o) {
        o << "test macro_accuracy " << rep.multi.macro_accuracy
          << ", micro_accuracy " << rep.multi.micro_accuracy << ", macro_auc "
          << rep.multi.macro_auc << ", micro_auc " << rep.multi.micro_auc;
      });
    }
  }
  return kExitOk;
}

int cmd_eval(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  if (args.init.empty())
    throw ConfigError("eval needs a checkpoint: --init PATH");
  auto data = dataset_from_config<float>(cfg.dataset);
  if (data.label_kind() == LabelKind::unlabeled)
    throw ValueError("eval: dataset '" + cfg.dataset.kind + "' has no labels");
  if (cfg.task == "single" && data.label_kind() != LabelKind::single_label)
    throw ConfigError("task = single but the dataset is multi-label");
  if (cfg.task == "multilabel" && data.label_kind() != LabelKind::multi_label)
    throw ConfigError("task = multilabel but the dataset is single-label");

  const LoadedCheckpoint<float> loaded = load_checkpoint<float>(args.init);
  if (!loaded.header.model.contains("kind") ||
      loaded.header.model["kind"] != "classifier")
    throw IncompatibilityError(
        "eval needs a classifier checkpoint; this one holds '" +
        loaded.header.model.value("kind", std::string("unknown")) + "'");
  const int64_t classes = loaded.header.model["classes"].get<int64_t>();
  ClassifierModel<float> model(loaded.header.backbone, classes, 0);
  loaded.load_into(model);

  const EvalReport rep = evaluate_classifier(model, data);
  std::ostringstream table;
  table << "metric,value\n";
  char buf[64];
  auto row = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    table << name << "," << buf << "\n";
  };
  if (rep.kind == LabelKind::single_label) {
    row("accuracy", rep.accuracy);
  } else {
    row("macro_accuracy", rep.multi.macro_accuracy);
    row("micro_accuracy", rep.multi.micro_accuracy);
    row("macro_auc", rep.multi.macro_auc);
    row("micro_auc", rep.multi.micro_auc);
  }
  std::cout << table.str();
  if (!cfg.out.empty()) {
    fs::create_directories(cfg.out);
    std::ofstream out(fs::path(cfg.out) / "eval.csv", std::ios::trunc);
    out << table.str();
  }
  return kExitOk;
}

int cmd_curves(const std::vector<std::string>& csvs, const std::string& out) {
  if (out.empty())
    throw ConfigError("curves needs an output directory: --out DIR");
  std::vector<RunCurve> runs;
  for (const std::string& path : csvs) runs.push_back(load_metrics_log(path));
  fs::create_directories(out);
  {
    std::ofstream svg(fs::path(out) / "curves.svg", std::ios::trunc);
    svg << render_curves_svg(runs);
  }
  {
    std::ofstream merged(fs::path(out) / "curves.csv", std::ios::trunc);
    merged << merged_tidy_csv(runs);
  }
  std::cout << "wrote " << (fs::path(out) / "curves.svg").string() << " and "
            << (fs::path(out) / "curves.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised representation learning lab"};
  app.require_subcommand(1);

  CommonArgs pre_args, ft_args, probe_args, eval_args;
  std::vector<std::string> curve_csvs;
  std::string curve_out;

  CLI::App* pre = app.add_subcommand("pretrain", "siamese two-view pretraining");
  add_common_flags(pre, pre_args, /*with_init=*/false);
  CLI::App* ft = app.add_subcommand("finetune", "supervised training of all weights");
  add_common_flags(ft, ft_args, /*with_init=*/true);
  CLI::App* probe = app.add_subcommand("probe", "linear probe on a frozen backbone");
  add_common_flags(probe, probe_args, /*with_init=*/true);
  CLI::App* ev = app.add_subcommand("eval", "score a classifier checkpoint");
  add_common_flags(ev, eval_args, /*with_init=*/true);
  CLI::App* cv = app.add_subcommand("curves", "loss-curve SVG + merged CSV from run logs");
  cv->add_option("csv", curve_csvs, "metrics CSV files")->required();
  cv->add_option("--out", curve_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInput;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(pre_args);
    if (ft->parsed()) return run_supervised_command(ft_args, Regime::finetune);
    if (probe->parsed()) return run_supervised_command(probe_args, Regime::probe);
    if (ev->parsed()) return cmd_eval(eval_args);
    if (cv->parsed()) return cmd_curves(curve_csvs, curve_out);
  } catch (const DegenerateError& e) {
    std::cerr << "error (collapse): " << e.what() << "\n";
    return kExitCollapse;
  } catch (const IncompatibilityError& e) {
    std::cerr << "error (incompatible): " << e.what() << "\n";
    return kExitIncompatible;
  } catch (const ConfigError& e) {
    std::cerr << "error (config): " << e.what() << "\n";
    return kExitInput;
  } catch (const FormatError& e) {
    std::cerr << "error (input): " << e.what() << "\n";
    return kExitInput;
  } catch (const ValueError& e) {
    std::cerr << "error (input): " << e.what() << "\n";
    return kExitInput;
  } catch (const ShapeError& e) {
    std::cerr << "error (input): " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
