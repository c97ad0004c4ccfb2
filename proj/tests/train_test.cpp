// Tests for the training module: pretraining loop contract, supervised
// fine-tune/probe regimes, validation splitting, metrics CSV, and the
// checkpoint-to-classifier hand-off.
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ssllab/train.hpp"

namespace fs = std::filesystem;
using namespace ssllab;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("ssllab_train_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

BackboneConfig tiny_backbone() {
  BackboneConfig bb;
  bb.family = "resnet_small";
  bb.in_h = 16;
  bb.in_w = 16;
  bb.width_multiplier = 0.25;
  bb.depth = 1;
  return bb;
}

// The two-view policy used by the pretraining smoke runs: moderate crops and
// jitter, no blur (16x16 inputs are already near the blur kernel size).
AugmentationPolicy smoke_policy(uint64_t seed) {
  AugmentationPolicy pol = AugmentationPolicy::default_policy(seed);
  pol.crop_scale_min = 0.4;
  pol.jitter_p = 0.5;
  pol.jitter_brightness = 0.2;
  pol.jitter_contrast = 0.2;
  pol.jitter_saturation = 0.2;
  pol.jitter_hue = 0.05;
  pol.grayscale_p = 0.1;
  pol.blur_p = 0.0;
  return pol;
}

std::vector<std::vector<float>> snapshot(std::vector<Tensor<float>> ts) {
  std::vector<std::vector<float>> out;
  for (auto& t : ts) out.push_back(t.data());
  return out;
}

}  // namespace

TEST(PretrainSmoke, FiveEpochsLearnWithoutCollapse) {
  const fs::path dir = fresh_dir("smoke");
  auto data = synth_shapes<float>(512, {3, 16, 16}, 4, 42);
  SiameseConfig sc;
  sc.backbone = tiny_backbone();
  sc.projection_dim = 128;
  SiameseModel<float> model(sc, 7);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 16;
  tc.accumulation = 1;
  tc.base_lr = 3.2e-2;
  tc.seed = 7;
  auto pol = smoke_policy(7);

  const PretrainResult r =
      train_pretrain(model, sc, data, pol, tc, dir.string());

  ASSERT_EQ(r.epoch_mean_loss.size(), 5u);
  // Training made progress: the last applied step sits well below the
  // first epoch's average.
  EXPECT_LT(r.final_step_loss, r.epoch_mean_loss.front());
  // No collapse: the z-spread stays above half the isotropic value 1/sqrt(d).
  EXPECT_GT(r.final_representation_std, 0.5 / std::sqrt(128.0));
  EXPECT_EQ(r.applied_steps, 5 * (512 / 16));
  // Run artifacts: metrics CSV plus final and best checkpoints.
  EXPECT_TRUE(fs::exists(r.final_checkpoint));
  EXPECT_TRUE(fs::exists(r.best_checkpoint));
  ASSERT_TRUE(fs::exists(dir / "metrics.csv"));

  // Every logged loss respects the [-1, 1] bound of the symmetric cosine
  // objective.
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,step,split,metric,value,lr");
  int loss_rows = 0;
  while (std::getline(csv, line)) {
    if (line.find(",pretrain,loss,") == std::string::npos) continue;
    ++loss_rows;
    std::istringstream row(line);
    std::string field;
    for (int i = 0; i < 5; ++i) std::getline(row, field, ',');
    const double loss = std::strtod(field.c_str(), nullptr);
    EXPECT_GE(loss, -1.0);
    EXPECT_LE(loss, 1.0);
  }
  EXPECT_EQ(loss_rows, 5 * (512 / 16));
}

TEST(PretrainSmoke, CollapseAbortNamesEpochAndStep) {
  // A batch of one has no spread, so the collapse monitor cannot even be
  // evaluated; the run must abort with the collapse diagnostic rather than
  // silently continuing.
  auto data = synth_shapes<float>(8, {3, 8, 8}, 2, 11);
  BackboneConfig bb = tiny_backbone();
  bb.in_h = 8;
  bb.in_w = 8;
  bb.width_multiplier = 0.0625;
  SiameseConfig sc;
  sc.backbone = bb;
  sc.projection_dim = 128;
  SiameseModel<float> model(sc, 3);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 1;
  tc.accumulation = 1;
  tc.seed = 3;
  auto pol = AugmentationPolicy::identity_policy();
  try {
    train_pretrain(model, sc, data, pol, tc);
    FAIL() << "expected a collapse diagnostic";
  } catch (const DegenerateError& e) {
    EXPECT_NE(std::string(e.what()).find("representation collapse at epoch 0"),
              std::string::npos)
        << e.what();
  }
}

TEST(PretrainSmoke, RejectsDatasetSmallerThanOneBatch) {
  auto data = synth_shapes<float>(8, {3, 8, 8}, 2, 11);
  BackboneConfig bb = tiny_backbone();
  bb.in_h = 8;
  bb.in_w = 8;
  bb.width_multiplier = 0.0625;
  SiameseConfig sc;
  sc.backbone = bb;
  sc.projection_dim = 128;
  SiameseModel<float> model(sc, 3);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  tc.accumulation = 1;
  auto pol = AugmentationPolicy::identity_policy();
  EXPECT_THROW(train_pretrain(model, sc, data, pol, tc), ValueError);
}

TEST(MetricsCsvFile, HeaderAndRowsRoundTrip) {
  const fs::path dir = fresh_dir("csv");
  const fs::path path = dir / "m.csv";
  {
    MetricsCsv csv(path.string());
    csv.log(0, 1, "train", "loss", 0.5, 1e-3);
    csv.log(3, 14, "val", "accuracy", 2.0 / 3.0, 0.0);
  }
  std::istringstream in(slurp(path));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,step,split,metric,value,lr");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("0,1,train,loss,", 0), 0u);
  std::getline(in, line);
  // Values are printed with 17 significant digits, so parsing the value field
  // back must reproduce the double bit-for-bit.
  std::istringstream row(line);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(row, field, ',')) fields.push_back(field);
  ASSERT_EQ(fields.size(), 6u);
  EXPECT_EQ(fields[0], "3");
  EXPECT_EQ(fields[1], "14");
  EXPECT_EQ(fields[2], "val");
  EXPECT_EQ(fields[3], "accuracy");
  EXPECT_EQ(std::strtod(fields[4].c_str(), nullptr), 2.0 / 3.0);
  EXPECT_EQ(std::strtod(fields[5].c_str(), nullptr), 0.0);
}

TEST(SplitValidation, DeterministicDisjointPartition) {
  const auto [train1, val1] = split_validation(103, 0.25, 9);
  const auto [train2, val2] = split_validation(103, 0.25, 9);
  EXPECT_EQ(train1, train2);
  EXPECT_EQ(val1, val2);
  EXPECT_EQ(val1.size(), 26u);  // llround(103 * 0.25)
  EXPECT_EQ(train1.size() + val1.size(), 103u);

  // Union is exactly {0..102}: disjoint and covering.
  std::vector<int64_t> all = train1;
  all.insert(all.end(), val1.begin(), val1.end());
  std::sort(all.begin(), all.end());
  for (int64_t i = 0; i < 103; ++i) EXPECT_EQ(all[static_cast<size_t>(i)], i);

  // A different seed draws a different split.
  const auto [train3, val3] = split_validation(103, 0.25, 10);
  EXPECT_NE(val1, val3);
}

TEST(SplitValidation, EdgeCases) {
  EXPECT_THROW(split_validation(1, 0.1, 0), ValueError);
  // Zero fraction: no validation items.
  const auto [train0, val0] = split_validation(10, 0.0, 0);
  EXPECT_TRUE(val0.empty());
  EXPECT_EQ(train0.size(), 10u);
  // A positive fraction always holds out at least one but never all items.
  const auto [train1, val1] = split_validation(3, 0.01, 0);
  EXPECT_EQ(val1.size(), 1u);
  const auto [train2, val2] = split_validation(3, 0.99, 0);
  EXPECT_EQ(train2.size(), 1u);
}

TEST(SupervisedTraining, ProbeOnFrozenRandomBackboneBeatsChance) {
  auto data = synth_shapes<float>(128, {3, 16, 16}, 2, 5);
  ClassifierModel<float> model(tiny_backbone(), 2, 5);
  const auto before = snapshot([&] {
    std::vector<Tensor<float>> ts;
    model.backbone().visit("", [&](const std::string&, Tensor<float>& t,
                                   bool) { ts.push_back(t); });
    return ts;
  }());

  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 16;
  tc.accumulation = 1;
  tc.seed = 5;
  train_supervised(model, data, tc, Regime::probe);

  const EvalReport rep = evaluate_classifier(model, data);
  EXPECT_GT(rep.accuracy, 0.5);

  // The probe regime must not touch the backbone: weights, biases, and the
  // BN running statistics all stay bitwise identical.
  std::vector<Tensor<float>> after;
  model.backbone().visit(
      "", [&](const std::string&, Tensor<float>& t, bool) { after.push_back(t); });
  ASSERT_EQ(before.size(), after.size());
  for (size_t i = 0; i < after.size(); ++i)
    EXPECT_EQ(before[i], after[i].data()) << "backbone tensor " << i;
}

TEST(SupervisedTraining, ZeroLrFinetuneLeavesTrainableParamsUnchanged) {
  auto data = synth_shapes<float>(64, {3, 16, 16}, 4, 6);
  ClassifierModel<float> model(tiny_backbone(), 4, 6);
  const auto before = snapshot(optimizable_tensors<float>(model));

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.accumulation = 1;
  tc.supervised_lr = 0.0;
  tc.weight_decay = 0.0;
  tc.seed = 6;
  train_supervised(model, data, tc, Regime::finetune);

  const auto after = snapshot(optimizable_tensors<float>(model));
  ASSERT_EQ(before.size(), after.size());
  for (size_t i = 0; i < after.size(); ++i)
    EXPECT_EQ(before[i], after[i]) << "trainable tensor " << i;
}

TEST(SupervisedTraining, RunArtifactsAndBestCheckpoint) {
  const fs::path dir = fresh_dir("sup");
  auto data = synth_shapes<float>(64, {3, 16, 16}, 4, 6);
  ClassifierModel<float> model(tiny_backbone(), 4, 6);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.accumulation = 1;
  tc.seed = 6;
  const SupervisedResult r =
      train_supervised(model, data, tc, Regime::finetune, nullptr,
                       dir.string());
  EXPECT_EQ(r.epoch_mean_loss.size(), 2u);
  EXPECT_GE(r.best_epoch, 0);
  EXPECT_TRUE(fs::exists(r.final_checkpoint));
  EXPECT_TRUE(fs::exists(r.best_checkpoint));
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  const std::string csv = slurp(dir / "metrics.csv");
  EXPECT_NE(csv.find(",train,loss,"), std::string::npos);
  EXPECT_NE(csv.find(",val,accuracy,"), std::string::npos);
}

TEST(SupervisedTraining, RejectsBadRegimeDataAndHead) {
  auto labeled = synth_shapes<float>(32, {3, 16, 16}, 4, 6);
  auto unlabeled = synth_gaussian<float>(32, {3, 16, 16}, 6);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  tc.accumulation = 1;

  ClassifierModel<float> model(tiny_backbone(), 4, 6);
  EXPECT_THROW(train_supervised(model, labeled, tc, Regime::pretrain),
               ConfigError);
  EXPECT_THROW(train_supervised(model, unlabeled, tc, Regime::finetune),
               ValueError);

  // A two-way head cannot fit four classes.
  ClassifierModel<float> narrow(tiny_backbone(), 2, 6);
  EXPECT_THROW(train_supervised(narrow, labeled, tc, Regime::finetune),
               IncompatibilityError);
}

TEST(CheckpointHandOff, BackboneSubtreeLoadCopiesBackboneOnly) {
  const fs::path dir = fresh_dir("handoff");
  BackboneConfig bb = tiny_backbone();
  bb.in_h = 8;
  bb.in_w = 8;
  bb.width_multiplier = 0.0625;
  SiameseConfig sc;
  sc.backbone = bb;
  sc.projection_dim = 8;
  SiameseModel<float> siam(sc, 21);
  const fs::path ckpt = dir / "pre.ckpt";
  save_checkpoint<float>(siam, ckpt.string(), bb, ChannelStats{});

  ClassifierModel<float> cls(bb, 3, 99);
  std::vector<std::vector<float>> head_before;
  cls.head().visit("", [&](const std::string&, Tensor<float>& t, bool) {
    head_before.push_back(t.data());
  });

  auto loaded = load_checkpoint<float>(ckpt.string());
  loaded.load_subtree(cls.backbone(), "backbone.");

  // Backbone now carries the siamese encoder weights ...
  std::vector<std::vector<float>> want;
  siam.backbone().visit("", [&](const std::string&, Tensor<float>& t, bool) {
    want.push_back(t.data());
  });
  std::vector<std::vector<float>> got;
  cls.backbone().visit("", [&](const std::string&, Tensor<float>& t, bool) {
    got.push_back(t.data());
  });
  ASSERT_EQ(want.size(), got.size());
  for (size_t i = 0; i < want.size(); ++i) EXPECT_EQ(want[i], got[i]);

  // ... while the classifier head keeps its fresh initialization.
  std::vector<std::vector<float>> head_after;
  cls.head().visit("", [&](const std::string&, Tensor<float>& t, bool) {
    head_after.push_back(t.data());
  });
  ASSERT_EQ(head_before.size(), head_after.size());
  for (size_t i = 0; i < head_after.size(); ++i)
    EXPECT_EQ(head_before[i], head_after[i]);
}

TEST(Evaluation, DeterministicAcrossCalls) {
  auto data = synth_shapes<float>(48, {3, 16, 16}, 3, 17);
  ClassifierModel<float> model(tiny_backbone(), 3, 17);
  const EvalReport a = evaluate_classifier(model, data);
  const EvalReport b = evaluate_classifier(model, data);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.headline, b.headline);
}

TEST(Evaluation, MultiLabelReportCarriesAllFourMetrics) {
  auto data = synth_shapes_multilabel<float>(48, {3, 16, 16}, 3, 17);
  ClassifierModel<float> model(tiny_backbone(), 3, 17);
  const EvalReport rep = evaluate_classifier(model, data);
  EXPECT_EQ(rep.kind, LabelKind::multi_label);
  EXPECT_GE(rep.multi.macro_accuracy, 0.0);
  EXPECT_LE(rep.multi.macro_accuracy, 1.0);
  EXPECT_GE(rep.multi.micro_auc, 0.0);
  EXPECT_LE(rep.multi.micro_auc, 1.0);
  EXPECT_EQ(rep.headline, rep.multi.micro_auc);
}

TEST(TrainConfigChecks, RejectsOutOfRangeFields) {
  TrainConfig tc;
  tc.epochs = 0;
  EXPECT_THROW(check_train_config(tc), ConfigError);
  tc = TrainConfig{};
  tc.batch_size = 0;
  EXPECT_THROW(check_train_config(tc), ConfigError);
  tc = TrainConfig{};
  tc.val_fraction = 1.0;
  EXPECT_THROW(check_train_config(tc), ConfigError);
  tc = TrainConfig{};
  tc.base_lr = -1.0;
  EXPECT_THROW(check_train_config(tc), ConfigError);
  EXPECT_NO_THROW(check_train_config(TrainConfig{}));
}
