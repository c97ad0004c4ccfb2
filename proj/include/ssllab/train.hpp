#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ssllab/augment.hpp"
#include "ssllab/checkpoint.hpp"
#include "ssllab/data.hpp"
#include "ssllab/losses.hpp"
#include "ssllab/metrics.hpp"
#include "ssllab/optim.hpp"
#include "ssllab/siamese.hpp"

namespace ssllab {

// ---------------------------------------------------------------------------
// Run configuration shared by the pretraining and supervised loops.
// `batch_size` is the micro-batch; one optimizer step is applied every
// `accumulation` micro-batches, so the effective batch is their product.
// ---------------------------------------------------------------------------

enum class Regime { pretrain, finetune, probe };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::pretrain: return "pretrain";
    case Regime::finetune: return "finetune";
    case Regime::probe: return "probe";
  }
  return "?";
}

struct TrainConfig {
  int64_t epochs = 5;
  int64_t batch_size = 64;
  int64_t accumulation = 8;
  double base_lr = 1e-3;        // pretrain: scaled linearly by batch/256
  double supervised_lr = 1e-3;  // flat rate for fine-tune and probe
  double weight_decay = 1e-5;
  bool decoupled_decay = false;
  double val_fraction = 0.1;
  uint64_t seed = 0;
  bool stop_gradient = true;  // ablation switch for the pretrain loop
};

inline void check_train_config(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.accumulation < 1) throw ConfigError("accumulation must be >= 1");
  if (c.base_lr < 0 || c.supervised_lr < 0)
    throw ConfigError("learning rates must be >= 0");
  if (c.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (c.val_fraction < 0 || c.val_fraction >= 1)
    throw ConfigError("val_fraction must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Metrics CSV: one file per run, append-only, flushed after every row so a
// crashed run leaves complete lines behind.
// ---------------------------------------------------------------------------

class MetricsCsv {
 public:
  MetricsCsv() = default;
  explicit MetricsCsv(const std::string& path) { open(path); }

  void open(const std::string& path) {
    out_.open(path, std::ios::trunc);
    if (!out_) throw FormatError("cannot open metrics CSV: " + path);
    out_ << "epoch,step,split,metric,value,lr\n";
    out_.flush();
  }

  bool is_open() const { return out_.is_open(); }

  void log(int64_t epoch, int64_t step, const std::string& split,
           const std::string& metric, double value, double lr) {
    if (!out_.is_open()) return;
    char line[256];
    std::snprintf(line, sizeof(line), "%lld,%lld,%s,%s,%.17g,%.17g\n",
                  static_cast<long long>(epoch), static_cast<long long>(step),
                  split.c_str(), metric.c_str(), value, lr);
    out_ << line;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Helpers shared by both loops
// ---------------------------------------------------------------------------

/// Deterministic held-out split: a seeded shuffle of [0,n) with the first
/// `fraction` of indices reserved for validation.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> split_validation(
    int64_t n, double fraction, uint64_t seed) {
  if (n < 2) throw ValueError("validation split needs at least 2 items");
  auto order = shuffled_indices(n, mix_seed(seed, 0x5a11dull));
  int64_t val_n = static_cast<int64_t>(std::llround(fraction * static_cast<double>(n)));
  val_n = std::max<int64_t>(fraction > 0 ? 1 : 0, std::min(val_n, n - 1));
  std::vector<int64_t> val(order.begin(), order.begin() + val_n);
  std::vector<int64_t> train(order.begin() + val_n, order.end());
  return {std::move(train), std::move(val)};
}

/// Tensors that the optimizer may update: flagged trainable by the module
/// AND currently requiring grad (a frozen backbone drops out of this list).
template <typename T, typename Visitable>
std::vector<Tensor<T>> optimizable_tensors(Visitable& m) {
  std::vector<Tensor<T>> out;
  m.visit("", [&](const std::string&, Tensor<T>& t, bool trainable) {
    if (trainable && t.requires_grad()) out.push_back(t);
  });
  return out;
}

namespace detail {

/// Assemble the two augmented views of the items at `indices`.
/// The augmentation stream index is unique per (epoch, item) so views differ
/// across epochs while staying fully reproducible.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> two_view_batch(
    const DatasetSource<T>& data, const AugmentationPolicy& policy,
    const std::vector<int64_t>& indices, int64_t epoch) {
  const Shape& item = data.item_shape();
  const int64_t per = data.pixels_per_item();
  const int64_t n = static_cast<int64_t>(indices.size());
  std::vector<T> v1, v2;
  v1.reserve(static_cast<size_t>(n * per));
  v2.reserve(static_cast<size_t>(n * per));
  for (int64_t idx : indices) {
    Tensor<T> img = data.image(idx);
    const uint64_t stream_index =
        static_cast<uint64_t>(epoch) * static_cast<uint64_t>(data.size()) +
        static_cast<uint64_t>(idx);
    Tensor<T> a = apply_view(img, policy, data.stats(), stream_index, 0);
    Tensor<T> b = apply_view(img, policy, data.stats(), stream_index, 1);
    v1.insert(v1.end(), a.data().begin(), a.data().end());
    v2.insert(v2.end(), b.data().begin(), b.data().end());
  }
  Shape bs{n, item[0], item[1], item[2]};
  return {Tensor<T>::make(bs, std::move(v1)), Tensor<T>::make(bs, std::move(v2))};
}

/// One augmented view per item (supervised training with light augmentation).
template <typename T>
Tensor<T> single_view_batch(const DatasetSource<T>& data,
                            const AugmentationPolicy& policy,
                            const std::vector<int64_t>& indices, int64_t epoch) {
  const Shape& item = data.item_shape();
  const int64_t per = data.pixels_per_item();
  const int64_t n = static_cast<int64_t>(indices.size());
  std::vector<T> v;
  v.reserve(static_cast<size_t>(n * per));
  for (int64_t idx : indices) {
    Tensor<T> img = data.image(idx);
    const uint64_t stream_index =
        static_cast<uint64_t>(epoch) * static_cast<uint64_t>(data.size()) +
        static_cast<uint64_t>(idx);
    Tensor<T> a = apply_view(img, policy, data.stats(), stream_index, 0);
    v.insert(v.end(), a.data().begin(), a.data().end());
  }
  return Tensor<T>::make({n, item[0], item[1], item[2]}, std::move(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Self-supervised pretraining
// ---------------------------------------------------------------------------

struct PretrainResult {
  std::vector<double> epoch_mean_loss;
  double final_step_loss = 0.0;
  double final_representation_std = 0.0;
  int64_t applied_steps = 0;
  double resolved_lr = 0.0;  // after the linear batch-scaling rule
  int64_t best_epoch = -1;
  std::string final_checkpoint;
  std::string best_checkpoint;
};

/// Two-view siamese pretraining with the symmetric stop-gradient loss.
/// Gradients accumulate over `accumulation` micro-batches (each micro loss is
/// scaled by 1/accumulation, so the applied step sees the effective-batch
/// mean); the cosine schedule advances once per applied step. A degenerate
/// (zero-norm) projection aborts the run with a collapse diagnostic.
template <typename T>
PretrainResult train_pretrain(SiameseModel<T>& model, const SiameseConfig& scfg,
                              const DatasetSource<T>& data,
                              const AugmentationPolicy& policy,
                              const TrainConfig& cfg,
                              const std::string& out_dir = "",
                              std::ostream* log = nullptr) {
  check_train_config(cfg);
  const int64_t n = data.size();
  const int64_t effective = cfg.batch_size * cfg.accumulation;
  const int64_t steps_per_epoch = n / effective;
  if (steps_per_epoch < 1)
    throw ValueError("dataset of " + std::to_string(n) +
                     " items is smaller than one effective batch of " +
                     std::to_string(effective));

  PretrainResult res;
  res.resolved_lr = pretrain_lr(cfg.base_lr, effective);
  const CosineSchedule sched{res.resolved_lr, cfg.epochs * steps_per_epoch};
  if (log)
    *log << "pretrain lr: base " << cfg.base_lr << " x " << effective
         << "/256 = " << res.resolved_lr << " (cosine over "
         << sched.total_steps << " steps)\n"
         << "stop_gradient: " << (cfg.stop_gradient ? "on" : "off") << "\n";

  MetricsCsv csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open((std::filesystem::path(out_dir) / "metrics.csv").string());
  }

  Adam<T> opt(trainable_tensors<T>(model), cfg.weight_decay,
              cfg.decoupled_decay);
  model.set_mode(Mode::train);

  double best_epoch_loss = 0.0;
  int64_t t = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = data.shuffled_order(cfg.seed, static_cast<uint64_t>(epoch));
    double epoch_loss = 0.0;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      opt.zero_grad();
      double step_loss = 0.0;
      double rep_std = 0.0;
      for (int64_t a = 0; a < cfg.accumulation; ++a) {
        const int64_t begin = step * effective + a * cfg.batch_size;
        const std::vector<int64_t> indices(order.begin() + begin,
                                           order.begin() + begin + cfg.batch_size);
        auto [x1, x2] = detail::two_view_batch(data, policy, indices, epoch);
        try {
          auto outs = siamese_forward(model, x1, x2, cfg.stop_gradient);
          auto loss = symmetric_loss(outs.p1, outs.p2, outs.z1, outs.z2);
          step_loss += loss.data()[0] / static_cast<double>(cfg.accumulation);
          rep_std = representation_std(outs.z1);
          backward(ssllab::scale(loss, static_cast<T>(1.0 / cfg.accumulation)));
        } catch (const DegenerateError& e) {
          const std::string diag =
              "representation collapse at epoch " + std::to_string(epoch) +
              " step " + std::to_string(t) + ": " + e.what() +
              " (last representation_std " + std::to_string(rep_std) + ")";
          if (log) *log << diag << "\n";
          throw DegenerateError(diag);
        }
      }
      const double lr = cosine_lr(sched, t);
      opt.step(lr);
      ++t;
      csv.log(epoch, t, "pretrain", "loss", step_loss, lr);
      csv.log(epoch, t, "pretrain", "representation_std", rep_std, lr);
      epoch_loss += step_loss;
      res.final_step_loss = step_loss;
      res.final_representation_std = rep_std;
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);
    res.epoch_mean_loss.push_back(epoch_loss);
    if (log)
      *log << "epoch " << epoch << ": mean loss " << epoch_loss
           << ", representation_std " << res.final_representation_std << "\n";
    if (res.best_epoch < 0 || epoch_loss < best_epoch_loss) {
      best_epoch_loss = epoch_loss;
      res.best_epoch = epoch;
      if (!out_dir.empty()) {
        res.best_checkpoint =
            (std::filesystem::path(out_dir) / "best.ckpt").string();
        save_checkpoint<T>(model, res.best_checkpoint, scfg.backbone,
                           data.stats(),
                           {{"kind", "siamese"},
                            {"projection_dim", scfg.projection_dim},
                            {"projection_bn_output", scfg.projection_bn_output}},
                           {{"regime", "pretrain"},
                            {"epoch", epoch},
                            {"mean_loss", epoch_loss}});
      }
    }
  }
  res.applied_steps = t;
  if (!out_dir.empty()) {
    res.final_checkpoint =
        (std::filesystem::path(out_dir) / "final.ckpt").string();
    save_checkpoint<T>(model, res.final_checkpoint, scfg.backbone, data.stats(),
                       {{"kind", "siamese"},
                        {"projection_dim", scfg.projection_dim},
                        {"projection_bn_output", scfg.projection_bn_output}},
                       {{"regime", "pretrain"},
                        {"epochs", cfg.epochs},
                        {"final_loss", res.final_step_loss}});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Supervised classifier: shared backbone plus one linear head
// ---------------------------------------------------------------------------

template <typename T>
class ClassifierModel {
 public:
  ClassifierModel(const BackboneConfig& cfg, int64_t classes, uint64_t seed)
      : backbone_(build_backbone<T>(cfg, mix_seed(seed, 1))),
        head_(backbone_->output_dim(), classes, mix_seed(seed, 2)) {
    if (classes < 1) throw ConfigError("classifier needs at least one output");
  }

  Backbone<T>& backbone() { return *backbone_; }
  Linear<T>& head() { return head_; }
  int64_t classes() const { return head_.out_dim(); }

  Tensor<T> forward(const Tensor<T>& x) {
    return head_.forward(backbone_->forward(x));
  }

  void set_mode(Mode m) { backbone_->set_mode(m); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    backbone_->visit(prefix + "backbone.", fn);
    head_.visit(prefix + "head", fn);
  }

  /// Probe regime: backbone weights frozen and its BatchNorm kept in eval
  /// mode, so only the linear head learns.
  void freeze_backbone() {
    set_trainable<T>(*backbone_, false);
    backbone_->set_mode(Mode::eval);
    frozen_ = true;
  }
  bool frozen() const { return frozen_; }

 private:
  std::unique_ptr<Backbone<T>> backbone_;
  Linear<T> head_;
  bool frozen_ = false;
};

/// Light supervised-training augmentation: random crop and horizontal flip
/// only (no photometric stage).
inline AugmentationPolicy supervised_policy(uint64_t seed) {
  AugmentationPolicy p = AugmentationPolicy::identity_policy();
  p.crop_scale_min = 0.5;
  p.crop_scale_max = 1.0;
  p.flip_p = 0.5;
  p.seed = seed;
  return p;
}

struct EvalReport {
  LabelKind kind = LabelKind::unlabeled;
  double accuracy = 0.0;        // single-label
  MultiLabelMetrics multi;      // multi-label
  /// The model-selection scalar: accuracy or micro AUC.
  double headline = 0.0;
};

/// Forward the listed items in eval mode (no grad, no augmentation) and score
/// them: argmax accuracy for single-label data, thresholded accuracy plus
/// rank-statistic AUC for multi-label data.
template <typename T>
EvalReport evaluate_classifier(ClassifierModel<T>& model,
                               const DatasetSource<T>& data,
                               const std::vector<int64_t>& indices,
                               int64_t batch = 64) {
  if (data.label_kind() == LabelKind::unlabeled)
    throw ValueError("evaluate: dataset has no labels");
  if (indices.empty()) throw ValueError("evaluate: empty index list");
  model.set_mode(Mode::eval);
  const int64_t n = static_cast<int64_t>(indices.size());
  const int64_t m = model.classes();
  std::vector<T> all_scores;
  all_scores.reserve(static_cast<size_t>(n * m));
  {
    NoGradGuard ng;
    for (int64_t begin = 0; begin < n; begin += batch) {
      const int64_t len = std::min(batch, n - begin);
      const std::vector<int64_t> chunk(indices.begin() + begin,
                                       indices.begin() + begin + len);
      Tensor<T> logits = model.forward(data.batch(chunk));
      all_scores.insert(all_scores.end(), logits.data().begin(),
                        logits.data().end());
    }
  }
  Tensor<T> logits = Tensor<T>::make({n, m}, std::move(all_scores));
  EvalReport rep;
  rep.kind = data.label_kind();
  if (rep.kind == LabelKind::single_label) {
    rep.accuracy = ssllab::accuracy(argmax_rows(logits), data.label_batch(indices));
    rep.headline = rep.accuracy;
  } else {
    std::vector<T> probs = logits.data();
    for (auto& v : probs)
      v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    Tensor<T> scores = Tensor<T>::make({n, m}, std::move(probs));
    rep.multi = macro_micro_metrics(scores, data.attribute_batch(indices), 0.5);
    rep.headline = rep.multi.micro_auc;
  }
  return rep;
}

/// Convenience: evaluate on an entire dataset.
template <typename T>
EvalReport evaluate_classifier(ClassifierModel<T>& model,
                               const DatasetSource<T>& data,
                               int64_t batch = 64) {
  std::vector<int64_t> all(static_cast<size_t>(data.size()));
  for (int64_t i = 0; i < data.size(); ++i) all[static_cast<size_t>(i)] = i;
  return evaluate_classifier(model, data, all, batch);
}

// ---------------------------------------------------------------------------
// Supervised training (fine-tune / linear probe)
// ---------------------------------------------------------------------------

struct SupervisedResult {
  std::vector<double> epoch_mean_loss;
  double best_val_metric = 0.0;
  int64_t best_epoch = -1;
  double final_val_metric = 0.0;
  int64_t applied_steps = 0;
  std::string final_checkpoint;
  std::string best_checkpoint;
};

/// Cross-entropy (single-label) or element-wise binary cross-entropy
/// (multi-label) training at a flat learning rate, with the same
/// micro-batch accumulation as pretraining. A seeded fraction of the training
/// set is held out; the best checkpoint is chosen by validation accuracy
/// (single-label) or micro AUC (multi-label).
template <typename T>
SupervisedResult train_supervised(ClassifierModel<T>& model,
                                  const DatasetSource<T>& data,
                                  const TrainConfig& cfg, Regime regime,
                                  const AugmentationPolicy* aug = nullptr,
                                  const std::string& out_dir = "",
                                  std::ostream* log = nullptr) {
  check_train_config(cfg);
  if (regime == Regime::pretrain)
    throw ConfigError("train_supervised handles finetune/probe only");
  if (data.label_kind() == LabelKind::unlabeled)
    throw ValueError("supervised training needs a labeled dataset");
  if (data.label_kind() == LabelKind::single_label &&
      model.classes() < data.label_width())
    throw IncompatibilityError(
        "head has " + std::to_string(model.classes()) + " outputs but data has " +
        std::to_string(data.label_width()) + " classes");

  if (regime == Regime::probe) model.freeze_backbone();

  auto [train_idx, val_idx] =
      split_validation(data.size(), cfg.val_fraction, cfg.seed);
  const int64_t effective = cfg.batch_size * cfg.accumulation;
  const int64_t steps_per_epoch =
      static_cast<int64_t>(train_idx.size()) / effective;
  if (steps_per_epoch < 1)
    throw ValueError("training split of " + std::to_string(train_idx.size()) +
                     " items is smaller than one effective batch of " +
                     std::to_string(effective));
  if (log)
    *log << regime_name(regime) << " lr: flat " << cfg.supervised_lr
         << "; train/val split " << train_idx.size() << "/" << val_idx.size()
         << " (seed " << cfg.seed << ")\n";

  MetricsCsv csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open((std::filesystem::path(out_dir) / "metrics.csv").string());
  }

  Adam<T> opt(optimizable_tensors<T>(model), cfg.weight_decay,
              cfg.decoupled_decay);
  const bool multi = data.label_kind() == LabelKind::multi_label;

  nlohmann::json model_info{{"kind", "classifier"},
                            {"classes", model.classes()},
                            {"label_kind", multi ? "multi" : "single"}};

  SupervisedResult res;
  int64_t t = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    model.set_mode(model.frozen() ? Mode::eval : Mode::train);
    // Per-epoch reshuffle of the training indices only.
    auto order = train_idx;
    {
      auto perm = shuffled_indices(static_cast<int64_t>(order.size()),
                                   mix_seed(cfg.seed, static_cast<uint64_t>(epoch),
                                            0x7e41ull));
      std::vector<int64_t> shuffled(order.size());
      for (size_t i = 0; i < order.size(); ++i)
        shuffled[i] = order[static_cast<size_t>(perm[i])];
      order = std::move(shuffled);
    }
    double epoch_loss = 0.0;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      opt.zero_grad();
      double step_loss = 0.0;
      for (int64_t a = 0; a < cfg.accumulation; ++a) {
        const int64_t begin = step * effective + a * cfg.batch_size;
        const std::vector<int64_t> chunk(order.begin() + begin,
                                         order.begin() + begin + cfg.batch_size);
        Tensor<T> x = aug ? detail::single_view_batch(data, *aug, chunk, epoch)
                          : data.batch(chunk);
        Tensor<T> logits = model.forward(x);
        Tensor<T> loss =
            multi ? binary_cross_entropy(logits, data.attribute_batch(chunk))
                  : cross_entropy(logits, data.label_batch(chunk));
        step_loss += loss.data()[0] / static_cast<double>(cfg.accumulation);
        backward(ssllab::scale(loss, static_cast<T>(1.0 / cfg.accumulation)));
      }
      opt.step(cfg.supervised_lr);
      ++t;
      csv.log(epoch, t, "train", "loss", step_loss, cfg.supervised_lr);
      epoch_loss += step_loss;
    }
    res.epoch_mean_loss.push_back(epoch_loss /
                                  static_cast<double>(steps_per_epoch));

    // Validation at the end of every epoch drives model selection.
    double val_metric;
    if (!val_idx.empty()) {
      const EvalReport rep = evaluate_classifier(model, data, val_idx,
                                                 cfg.batch_size);
      val_metric = rep.headline;
      if (rep.kind == LabelKind::single_label) {
        csv.log(epoch, t, "val", "accuracy", rep.accuracy, cfg.supervised_lr);
      } else {
        csv.log(epoch, t, "val", "macro_accuracy", rep.multi.macro_accuracy,
                cfg.supervised_lr);
        csv.log(epoch, t, "val", "micro_accuracy", rep.multi.micro_accuracy,
                cfg.supervised_lr);
        csv.log(epoch, t, "val", "macro_auc", rep.multi.macro_auc,
                cfg.supervised_lr);
        csv.log(epoch, t, "val", "micro_auc", rep.multi.micro_auc,
                cfg.supervised_lr);
      }
    } else {
      // No held-out data: fall back to training loss for selection.
      val_metric = -res.epoch_mean_loss.back();
    }
    res.final_val_metric = val_metric;
    if (res.best_epoch < 0 || val_metric > res.best_val_metric) {
      res.best_val_metric = val_metric;
      res.best_epoch = epoch;
      if (!out_dir.empty()) {
        res.best_checkpoint =
            (std::filesystem::path(out_dir) / "best.ckpt").string();
        save_checkpoint<T>(model, res.best_checkpoint,
                           model.backbone().config(), data.stats(), model_info,
                           {{"regime", regime_name(regime)},
                            {"epoch", epoch},
                            {"val_metric", val_metric}});
      }
    }
    if (log)
      *log << "epoch " << epoch << ": mean loss "
           << res.epoch_mean_loss.back() << ", val metric " << val_metric
           << "\n";
  }
  res.applied_steps = t;
  if (!out_dir.empty()) {
    res.final_checkpoint =
        (std::filesystem::path(out_dir) / "final.ckpt").string();
    save_checkpoint<T>(model, res.final_checkpoint, model.backbone().config(),
                       data.stats(), model_info,
                       {{"regime", regime_name(regime)},
                        {"epochs", cfg.epochs},
                        {"best_epoch", res.best_epoch}});
  }
  return res;
}

}  // namespace ssllab
