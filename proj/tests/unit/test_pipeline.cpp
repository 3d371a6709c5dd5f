#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "biaswap/pipeline.hpp"

namespace biaswap {
namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("biaswap_pipeline_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A few-second oracle-swap configuration over the bundled digits.
PipelineConfig tiny_config(const fs::path& root) {
  PipelineConfig c;
  c.set_base_dir(BIASWAP_SOURCE_DIR);
  c.set("output.root", root.string())
      .set("dataset.train_size", "400")
      .set("dataset.unbiased_size", "100")
      .set("dataset.guiding_size", "50")
      .set("dataset.bias_ratio", "0.95")
      .set("biased.epochs", "2")
      .set("biased.batch_size", "64")
      .set("partition.snapshot_epoch", "1")
      .set("partition.cam_dumps", "2")
      .set("augment.class_matching", "false")
      .set("debias.epochs", "1")
      .set("debias.batch_size", "64")
      .set("ablation.oracle_swap", "true");
  return c;
}

TEST(PipelineConfig, ParsesFileAndReportsLineOnError) {
  const fs::path dir = scratch("parse");
  io::write_text(dir / "a.conf", "# comment\nseed = 3   # trailing\n\ndataset.bias_ratio=0.990\nbiased.loss = ce\n");
  const auto c = PipelineConfig::load(dir / "a.conf");
  EXPECT_EQ(c.integer("seed"), 3);
  EXPECT_EQ(c.str("dataset.bias_ratio"), "0.99");
  EXPECT_EQ(c.str("biased.loss"), "ce");
  EXPECT_EQ(c.str("debias.arch"), "mlp3");
  EXPECT_EQ(c.resolve("dataset.source"), dir / "data/mnist_5k.csv.gz");

  io::write_text(dir / "b.conf", "seed = 1\nbiased.epochs = many\n");
  try {
    PipelineConfig::load(dir / "b.conf");
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("b.conf:2"), std::string::npos) << e.what();
  }
  io::write_text(dir / "c.conf", "no.such.key = 1\n");
  EXPECT_THROW(PipelineConfig::load(dir / "c.conf"), InvalidArgument);
  io::write_text(dir / "d.conf", "seed\n");
  EXPECT_THROW(PipelineConfig::load(dir / "d.conf"), InvalidArgument);
  EXPECT_THROW(PipelineConfig().set("ablation.oracle_swap", "maybe"), InvalidArgument);
}

TEST(PipelineConfig, HashIsCanonicalAndIgnoresOutputRoot) {
  PipelineConfig a, b;
  a.set("biased.lr", "0.001");
  b.set("biased.lr", "1e-3");
  EXPECT_EQ(a.hash(), b.hash());
  b.set("output.root", "/elsewhere");
  EXPECT_EQ(a.hash(), b.hash());
  b.set("seed", "1");
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.run_dir().filename().string(), a.hash().substr(0, 16));
  EXPECT_EQ(a.hash().size(), 64u);
}

TEST(PipelineConfig, DesktopProfileMatchesBuiltInDefaults) {
  const auto desk = PipelineConfig::load(fs::path(BIASWAP_SOURCE_DIR) / "configs/desk.conf");
  PipelineConfig defaults;
  for (const auto& [k, v] : defaults.values())
    if (k != "output.root" && k != "dataset.source") EXPECT_EQ(desk.str(k), v) << k;
  EXPECT_TRUE(fs::exists(desk.resolve("dataset.source")));
  const auto t = desk.biased_train_config();
  EXPECT_EQ(t.epochs, 20);
  EXPECT_EQ(t.batch_size, 256);
  EXPECT_EQ(t.snapshot_epochs, std::vector<int>{5});
  EXPECT_EQ(desk.swapae_config().steps, 5000);
  EXPECT_EQ(desk.dataset_spec().sizes.train, 10000);
}

TEST(PipelineConfig, DerivedSeedsDifferByTag) {
  PipelineConfig c;
  EXPECT_NE(c.derived_seed("data"), c.derived_seed("biased"));
  EXPECT_EQ(c.derived_seed("data"), PipelineConfig().derived_seed("data"));
  EXPECT_EQ(c.dataset_spec().seed, c.derived_seed("data"));
  c.set("swapae.seed", "42");
  EXPECT_EQ(c.swapae_config().seed, 42u);
}

TEST(Ablations, C2ChangesOnlyTheCropMode) {
  const PipelineConfig base;
  const PipelineConfig c2 = ablated(base, Ablation::c2);
  SwapAEConfig a = base.swapae_config(), b = c2.swapae_config();
  EXPECT_EQ(a.crop_mode, CropMode::bias_tailored);
  EXPECT_EQ(b.crop_mode, CropMode::uniform);
  b.crop_mode = a.crop_mode;
  EXPECT_EQ(a, b);
  EXPECT_EQ(base.augmentation_plan(), c2.augmentation_plan());
  EXPECT_EQ(base.biased_train_config(), c2.biased_train_config());
  EXPECT_EQ(base.debias_train_config(), c2.debias_train_config());
  EXPECT_EQ(base.dataset_spec(), c2.dataset_spec());
  EXPECT_EQ(c2.ablation_tag(), "w/o c2");
}

TEST(Ablations, C1SwitchesToRandomPairsOnly) {
  const PipelineConfig base;
  const PipelineConfig c1 = ablated(base, Ablation::c1);
  AugmentationPlan p = c1.augmentation_plan();
  EXPECT_EQ(p.pairing, PairingPolicy::random_pairs);
  p.pairing = base.augmentation_plan().pairing;
  EXPECT_EQ(p, base.augmentation_plan());
  EXPECT_EQ(base.swapae_config(), c1.swapae_config());
  EXPECT_EQ(c1.ablation_tag(), "w/o c1");
  EXPECT_EQ(ablated(c1, Ablation::c2).ablation_tag(), "w/o c1+c2");
  EXPECT_THROW(parse_ablation("c3"), InvalidArgument);
}

TEST(StageHashes, OnlyUpstreamKeysMatter) {
  PipelineConfig a, b;
  b.set("debias.epochs", "3");
  EXPECT_EQ(stage_hash(a, Stage::partition), stage_hash(b, Stage::partition));
  EXPECT_EQ(stage_hash(a, Stage::swapae_train), stage_hash(b, Stage::swapae_train));
  EXPECT_NE(stage_hash(a, Stage::debias_train), stage_hash(b, Stage::debias_train));
  EXPECT_NE(vanilla_hash(a), vanilla_hash(b));
  b = a;
  b.set("swapae.steps", "10");
  EXPECT_NE(stage_hash(a, Stage::augment), stage_hash(b, Stage::augment));
  EXPECT_EQ(vanilla_hash(a), vanilla_hash(b));
  EXPECT_EQ(parse_stage("swapae_train"), Stage::swapae_train);
  EXPECT_THROW(parse_stage("train"), InvalidArgument);
}

TEST(Pipeline, MissingUpstreamStageIsNamed) {
  const fs::path root = scratch("missing");
  Pipeline p(tiny_config(root), nullptr);
  try {
    p.run_stage(Stage::partition);
    FAIL() << "expected MissingArtifact";
  } catch (const MissingArtifact& e) {
    EXPECT_EQ(std::string(e.what()).rfind("data required", 0), 0u) << e.what();
  }
  p.run_stage(Stage::data);
  try {
    p.run_stage(Stage::partition);
    FAIL() << "expected MissingArtifact";
  } catch (const MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("biased_train required"), std::string::npos) << e.what();
  }
}

class TinyRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("tiny"));
    Pipeline p(tiny_config(*root_), nullptr);
    report_ = new json(p.run_all());
  }
  static void TearDownTestSuite() {
    delete report_;
    delete root_;
  }
  static fs::path* root_;
  static json* report_;
};
fs::path* TinyRun::root_ = nullptr;
json* TinyRun::report_ = nullptr;

TEST_F(TinyRun, ProducesSchemaValidReportAndArtifacts) {
  EXPECT_NO_THROW(validate_report(*report_));
  EXPECT_EQ((*report_)["swap_mode"], "oracle");
  EXPECT_EQ((*report_)["ablation_tag"], "full");
  EXPECT_FALSE(report_->contains("swap_probe"));
  Pipeline p(tiny_config(*root_), nullptr);
  const fs::path run = p.run_dir();
  EXPECT_EQ(io::read_text(run / "config.kv"), tiny_config(*root_).canonical());
  EXPECT_EQ(io::sha256_hex(io::read_text(run / "config.kv")), (*report_)["config_hash"].get<std::string>());
  for (const char* f : {"data/dataset/manifest.ndjson", "biased_train/snapshot.ckpt", "biased_train/loss_curve.csv", "partition/partition.csv",
                        "partition/thresholds.txt", "swapae_train/SKIPPED", "augment/contact_sheet.ppm", "augment/pairs.csv",
                        "debias_train/vanilla/model.ckpt", "debias_train/debiased/model.ckpt", "evaluate/evaluation.json",
                        "report/summary.txt", "report/accuracy_vs_bias_ratio.svg"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  const Dataset aug = load_manifest(run / "augment/dataset");
  EXPECT_EQ(aug.split(kTrainSplit).size(), 400u + (*report_)["dataset"]["num_augmented"].get<std::size_t>());
}

TEST_F(TinyRun, RerunIsUpToDateAndForceRecomputes) {
  Pipeline p(tiny_config(*root_), nullptr);
  for (Stage s : all_stages()) EXPECT_EQ(p.run_stage(s).outcome, StageResult::Outcome::up_to_date) << to_string(s);
  EXPECT_EQ(p.run_stage(Stage::evaluate, true).outcome, StageResult::Outcome::computed);
  const json again = json::parse(io::read_text(p.stage_dir(Stage::report) / "metrics_report.json"));
  EXPECT_EQ(again, *report_);
}

TEST_F(TinyRun, TamperedOutputInvalidatesStage) {
  Pipeline p(tiny_config(*root_), nullptr);
  const fs::path csv = p.stage_dir(Stage::partition) / "thresholds.txt";
  const std::string original = io::read_text(csv);
  io::write_text(csv, original + "x");
  EXPECT_EQ(p.run_stage(Stage::partition).outcome, StageResult::Outcome::computed);
  EXPECT_EQ(io::read_text(csv), original);
}

TEST_F(TinyRun, SiblingRunWithSameUpstreamIsReused) {
  auto cfg = tiny_config(*root_);
  cfg.set("debias.epochs", "2");
  Pipeline p(cfg, nullptr);
  EXPECT_EQ(p.run_stage(Stage::data).outcome, StageResult::Outcome::reused);
  EXPECT_EQ(p.run_stage(Stage::biased_train).outcome, StageResult::Outcome::reused);
  Pipeline base(tiny_config(*root_), nullptr);
  EXPECT_EQ(io::read_text(p.stage_dir(Stage::biased_train) / "loss_curve.csv"),
            io::read_text(base.stage_dir(Stage::biased_train) / "loss_curve.csv"));
}

TEST(Evaluate, ConstantClassifierScoresOneTenth) {
  ClassifierSpec spec;
  spec.arch = Arch::mlp3;
  Classifier clf(spec, 1);
  for (auto& p : clf.parameters()) nn::Var(p.var).mutable_value().fill(0.0f);
  nn::Var(clf.head().bias).mutable_value()[0] = 1.0f;
  Dataset d;
  d.spec.attributes = default_palette();
  for (const char* split : {kUnbiasedSplit, kGuidingSplit})
    for (int i = 0; i < 50; ++i) {
      LabeledExample ex;
      ex.id = detail::pad_id(split, i);
      ex.image = Image(28, 28, 3);
      ex.target = i % 10;
      ex.gt_bias_flag = i % 2 == 1;
      d.splits[split].push_back(ex);
    }
  const Evaluation e = evaluate(clf, d);
  EXPECT_DOUBLE_EQ(e.unbiased.accuracy, 0.1);
  EXPECT_DOUBLE_EQ(e.guiding.accuracy, 0.1);
  EXPECT_EQ(e.contrary.count, 25u);
  EXPECT_EQ(e.unbiased.confusion[3][0], 5);
  d.splits[kGuidingSplit][0].image = Image(32, 32, 3);
  EXPECT_THROW(evaluate(clf, d), InvalidArgument);
}

json sample_report(double ratio, const std::string& tag, double delta) {
  return json{{"schema_version", 1},
              {"config_hash", std::string(64, 'a')},
              {"config", {{"seed", "0"}}},
              {"ablation_tag", tag},
              {"swap_mode", "oracle"},
              {"seed", 0},
              {"dataset", {{"kind", "colored_mnist"}, {"bias_ratio", ratio}, {"num_train", 100}, {"num_augmented", 90}}},
              {"vanilla", {{"unbiased_accuracy", 0.4}, {"bias_guiding_accuracy", 0.99}, {"bias_contrary_accuracy", 0.3}}},
              {"debiased", {{"unbiased_accuracy", 0.4 + delta}, {"bias_guiding_accuracy", 0.97}, {"bias_contrary_accuracy", 0.6}}},
              {"delta_unbiased_accuracy", delta},
              {"partition", {{"precision", 0.9}, {"recall", 0.8}, {"f1", 0.85}, {"threshold", 0.03}, {"num_contrary", 12}}},
              {"loss_curves", {{"biased", "biased_train/loss_curve.csv"}}}};
}

TEST(Report, SchemaRejectsMalformedReports) {
  EXPECT_NO_THROW(validate_report(sample_report(0.99, "full", 0.2)));
  auto r = sample_report(0.99, "full", 0.2);
  r.erase("partition");
  EXPECT_THROW(validate_report(r), InvalidArgument);
  r = sample_report(0.99, "full", 0.2);
  r["partition"]["f1"] = 1.5;
  EXPECT_THROW(validate_report(r), InvalidArgument);
  r = sample_report(0.99, "without c1", 0.2);
  EXPECT_THROW(validate_report(r), InvalidArgument);
  r = sample_report(0.99, "full", 0.2);
  r["extra"] = 1;
  EXPECT_THROW(validate_report(r), InvalidArgument);
}

TEST(Report, ShippedSchemaFileMatchesEmbeddedCopy) {
  const json file = json::parse(io::read_text(fs::path(BIASWAP_SOURCE_DIR) / "schemas/metrics_report.v1.json"));
  EXPECT_EQ(file, metrics_report_schema());
}

TEST(Report, EmitGroupsReplicatesAndPlotsEachRatio) {
  const fs::path dir = scratch("emit");
  emit_report({sample_report(0.99, "full", 0.2), sample_report(0.99, "full", 0.3), sample_report(0.995, "w/o c1", 0.05)}, dir);
  const std::string summary = io::read_text(dir / "summary.txt");
  EXPECT_NE(summary.find("full | oracle | bias ratio 0.990  (n=2)"), std::string::npos) << summary;
  EXPECT_NE(summary.find("w/o c1 | oracle | bias ratio 0.995  (n=1)"), std::string::npos);
  EXPECT_NE(summary.find("0.2500  +/- 0.0707"), std::string::npos);
  const std::string svg = io::read_text(dir / "accuracy_vs_bias_ratio.svg");
  std::size_t ticks = 0;
  for (auto pos = svg.find("class=\"xtick\""); pos != std::string::npos; pos = svg.find("class=\"xtick\"", pos + 1)) ++ticks;
  EXPECT_EQ(ticks, 2u);
  EXPECT_NE(svg.find("debiased (w/o c1, oracle)"), std::string::npos);
  EXPECT_EQ(json::parse(io::read_text(dir / "reports.json")).size(), 3u);
  EXPECT_THROW(emit_report({}, dir), InvalidArgument);
}

}  // namespace
}  // namespace biaswap
