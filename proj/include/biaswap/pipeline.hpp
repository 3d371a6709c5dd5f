#pragma once

// End-to-end orchestration.
//
// A run is identified by the hash of its canonical configuration. Every stage
// writes into runs/<config-hash>/<stage>/ and finishes by writing stamp.json,
// which records a stage hash (over the configuration keys the stage and its
// upstream stages read) and a SHA-256 of every file it produced. A stage whose
// stamp matches is a no-op; a stage with the same stage hash in a sibling run
// directory is copied instead of recomputed.

#include <charconv>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "biaswap/bias_partition.hpp"
#include "biaswap/bias_swap_augment.hpp"
#include "biaswap/cam_sampler.hpp"
#include "biaswap/classifiers.hpp"
#include "biaswap/dataset.hpp"
#include "biaswap/json_schema.hpp"
#include "biaswap/report_schema.hpp"
#include "biaswap/swap_autoencoder.hpp"

namespace biaswap {

// ---- configuration ----------------------------------------------------------

enum class ValueType { string, integer, real, boolean };

struct ConfigKey {
  const char* name;
  ValueType type;
  const char* default_value;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", ValueType::integer, "0", "global seed; every component seed is derived from it"},
      {"dataset.kind", ValueType::string, "colored_mnist", "colored_mnist | corrupted_cifar10"},
      {"dataset.source", ValueType::string, "data/mnist_5k.csv.gz",
       "MNIST CSV (optionally gzipped) or CIFAR-10 binary directory; relative to the config file"},
      {"dataset.holdout_per_class", ValueType::integer, "100", "MNIST CSV: last N digits per class form the test pool"},
      {"dataset.bias_ratio", ValueType::real, "0.99", "fraction of bias-guiding training examples per class"},
      {"dataset.attributes", ValueType::string, "", "comma-separated colours or corruptions, one per class; empty = defaults"},
      {"dataset.severity", ValueType::integer, "4", "corruption severity 1..5"},
      {"dataset.train_size", ValueType::integer, "10000", "training examples"},
      {"dataset.unbiased_size", ValueType::integer, "2000", "unbiased test examples"},
      {"dataset.guiding_size", ValueType::integer, "1000", "bias-guiding test examples"},
      {"dataset.jitter", ValueType::integer, "2", "max random translation of source images in pixels"},
      {"biased.arch", ValueType::string, "conv_gap", "biased classifier architecture (conv_gap required for CAM)"},
      {"biased.loss", ValueType::string, "gce", "gce | ce"},
      {"biased.q", ValueType::real, "0.7", "GCE exponent"},
      {"biased.epochs", ValueType::integer, "20", "biased classifier epochs"},
      {"biased.batch_size", ValueType::integer, "256", ""},
      {"biased.lr", ValueType::real, "0.001", ""},
      {"biased.beta1", ValueType::real, "0.9", ""},
      {"biased.beta2", ValueType::real, "0.999", ""},
      {"partition.snapshot_epoch", ValueType::integer, "5", "biased-classifier epoch used for scoring and CAM"},
      {"partition.cam_dumps", ValueType::integer, "8", "CAM heatmaps written per partition side"},
      {"swapae.steps", ValueType::integer, "5000", "SwapAE training steps"},
      {"swapae.batch_size", ValueType::integer, "8", "pairs per step"},
      {"swapae.lr", ValueType::real, "0.002", ""},
      {"swapae.beta1", ValueType::real, "0", ""},
      {"swapae.beta2", ValueType::real, "0.99", ""},
      {"swapae.lambda_recon", ValueType::real, "1", ""},
      {"swapae.lambda_gan_recon", ValueType::real, "1", ""},
      {"swapae.lambda_gan_swap", ValueType::real, "1", ""},
      {"swapae.lambda_cooccur", ValueType::real, "1", ""},
      {"swapae.r1_gamma", ValueType::real, "0", "gradient penalty weight (only 0 supported)"},
      {"swapae.patch_size", ValueType::integer, "7", "co-occurrence crop side in pixels"},
      {"swapae.n_ref", ValueType::integer, "4", "reference crops per style image"},
      {"swapae.tau", ValueType::real, "10", "CAM softmax temperature"},
      {"swapae.content_channels", ValueType::integer, "4", ""},
      {"swapae.style_dim", ValueType::integer, "16", ""},
      {"swapae.seed", ValueType::string, "auto", "explicit SwapAE seed, or auto to derive it from seed"},
      {"swapae.sample_every", ValueType::integer, "1000", "steps between sample-grid dumps (0 = off)"},
      {"swapae.checkpoint_every", ValueType::integer, "1000", "steps between checkpoints (0 = final only)"},
      {"augment.ratio", ValueType::real, "1", "bias-swapped images per bias-guiding image"},
      {"augment.class_matching", ValueType::boolean, "true", "draw styles from the content's class"},
      {"debias.arch", ValueType::string, "mlp3", "debiased and vanilla classifier architecture"},
      {"debias.loss", ValueType::string, "ce", ""},
      {"debias.q", ValueType::real, "0.7", ""},
      {"debias.epochs", ValueType::integer, "20", ""},
      {"debias.batch_size", ValueType::integer, "256", ""},
      {"debias.lr", ValueType::real, "0.001", ""},
      {"debias.beta1", ValueType::real, "0.9", ""},
      {"debias.beta2", ValueType::real, "0.999", ""},
      {"evaluate.probe_pairs", ValueType::integer, "200", "swap pairs used for the hue-transfer probe"},
      {"ablation.disable_separation", ValueType::boolean, "false", "c1: random content/style pairs"},
      {"ablation.disable_cam_sampling", ValueType::boolean, "false", "c2: uniform co-occurrence crops"},
      {"ablation.oracle_swap", ValueType::boolean, "false", "replace the SwapAE by ground-truth recolouring"},
      {"output.root", ValueType::string, "runs", "run root; overridden by BIASWAP_RUN_ROOT"},
  };
  return keys;
}

inline const ConfigKey& config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (name == k.name) return k;
  throw InvalidArgument("unknown configuration key '" + name + "'");
}

namespace pipeline_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline std::string canonical_value(const ConfigKey& k, const std::string& raw) {
  const std::string v = trim(raw);
  auto bad = [&] { return InvalidArgument("bad value '" + v + "' for " + k.name); };
  switch (k.type) {
    case ValueType::string:
      return v;
    case ValueType::integer: {
      long long x = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size()) throw bad();
      return std::to_string(x);
    }
    case ValueType::real: {
      double x = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) throw bad();
      char buf[64];
      auto [e, ec2] = std::to_chars(buf, buf + sizeof buf, x);
      return std::string(buf, e);
    }
    case ValueType::boolean:
      if (v == "true" || v == "1" || v == "yes") return "true";
      if (v == "false" || v == "0" || v == "no") return "false";
      throw bad();
  }
  return v;
}

}  // namespace pipeline_detail

class PipelineConfig {
 public:
  PipelineConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  // key = value lines; '#' starts a comment. Relative paths resolve against the file's directory.
  static PipelineConfig load(const fs::path& path) {
    PipelineConfig c;
    c.base_dir_ = fs::absolute(path).parent_path();
    std::istringstream in(io::read_text(path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = pipeline_detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      try {
        c.set(pipeline_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
      } catch (const InvalidArgument& e) {
        throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return c;
  }

  PipelineConfig& set(const std::string& key, const std::string& value) {
    values_[key] = pipeline_detail::canonical_value(config_key(key), value);
    return *this;
  }

  const std::string& str(const std::string& key) const {
    config_key(key);
    return values_.at(key);
  }
  long long integer(const std::string& key) const { return std::stoll(str(key)); }
  double real(const std::string& key) const { return std::stod(str(key)); }
  bool boolean(const std::string& key) const { return str(key) == "true"; }

  const std::map<std::string, std::string>& values() const { return values_; }
  const fs::path& base_dir() const { return base_dir_; }
  void set_base_dir(fs::path p) { base_dir_ = std::move(p); }

  fs::path resolve(const std::string& key) const {
    const fs::path p = str(key);
    return p.is_absolute() || base_dir_.empty() ? p : base_dir_ / p;
  }

  // Sorted key=value lines for every key matching one of the prefixes
  // ("" matches all); output.root never participates.
  std::string canonical(const std::vector<std::string>& prefixes = {""}) const {
    std::string out;
    for (const auto& [k, v] : values_) {
      if (k == "output.root") continue;
      for (const auto& p : prefixes)
        if (k.rfind(p, 0) == 0) {
          out += k + "=" + v + "\n";
          break;
        }
    }
    return out;
  }

  std::string hash() const { return io::sha256_hex(canonical()); }

  fs::path run_root() const {
    if (const char* env = std::getenv("BIASWAP_RUN_ROOT"); env && *env) return env;
    return resolve("output.root");
  }
  fs::path run_dir() const { return run_root() / hash().substr(0, 16); }

  std::string ablation_tag() const {
    const bool c1 = boolean("ablation.disable_separation"), c2 = boolean("ablation.disable_cam_sampling");
    return c1 && c2 ? "w/o c1+c2" : c1 ? "w/o c1" : c2 ? "w/o c2" : "full";
  }

  std::uint64_t derived_seed(const std::string& tag) const {
    const std::string h = io::sha256_hex(str("seed") + ":" + tag);
    return std::stoull(h.substr(0, 15), nullptr, 16);
  }

  BiasedDatasetSpec dataset_spec() const {
    BiasedDatasetSpec s;
    s.kind = parse_dataset_kind(str("dataset.kind"));
    s.bias_ratio = real("dataset.bias_ratio");
    const std::string attrs = str("dataset.attributes");
    if (attrs.empty()) {
      s.attributes = s.kind == DatasetKind::colored_mnist ? default_palette() : corrupt::default_corruptions();
    } else {
      std::stringstream ss(attrs);
      std::string a;
      while (std::getline(ss, a, ',')) s.attributes.push_back(pipeline_detail::trim(a));
    }
    s.severity = static_cast<int>(integer("dataset.severity"));
    s.seed = derived_seed("data");
    s.sizes = {static_cast<int>(integer("dataset.train_size")), static_cast<int>(integer("dataset.unbiased_size")),
               static_cast<int>(integer("dataset.guiding_size"))};
    s.jitter = static_cast<int>(integer("dataset.jitter"));
    return s;
  }

  TrainConfig train_config(const std::string& prefix, const std::string& seed_tag) const {
    TrainConfig t;
    t.loss = parse_loss(str(prefix + ".loss"));
    t.q = real(prefix + ".q");
    t.epochs = static_cast<int>(integer(prefix + ".epochs"));
    t.batch_size = static_cast<int>(integer(prefix + ".batch_size"));
    t.learning_rate = real(prefix + ".lr");
    t.beta1 = real(prefix + ".beta1");
    t.beta2 = real(prefix + ".beta2");
    t.seed = derived_seed(seed_tag);
    t.snapshot_epochs.clear();
    return t;
  }

  TrainConfig biased_train_config() const {
    TrainConfig t = train_config("biased", "biased");
    const int snap = static_cast<int>(integer("partition.snapshot_epoch"));
    if (snap < 1 || snap > t.epochs) throw InvalidArgument("partition.snapshot_epoch must lie in [1, biased.epochs]");
    t.snapshot_epochs = {snap};
    return t;
  }

  // Vanilla and debiased classifiers share this configuration, seed included.
  TrainConfig debias_train_config() const { return train_config("debias", "debias"); }

  ClassifierSpec classifier_spec(const std::string& prefix) const {
    ClassifierSpec s;
    s.arch = parse_arch(str(prefix + ".arch"));
    s.num_classes = dataset_spec().num_classes();
    if (dataset_spec().kind == DatasetKind::corrupted_cifar10) s.height = s.width = 32;
    return s;
  }

  SwapAEConfig swapae_config() const {
    SwapAEConfig c;
    const auto ds = dataset_spec();
    if (ds.kind == DatasetKind::corrupted_cifar10) c.height = c.width = 32;
    c.steps = static_cast<int>(integer("swapae.steps"));
    c.batch_size = static_cast<int>(integer("swapae.batch_size"));
    c.learning_rate = real("swapae.lr");
    c.beta1 = real("swapae.beta1");
    c.beta2 = real("swapae.beta2");
    c.lambda_recon = real("swapae.lambda_recon");
    c.lambda_gan_recon = real("swapae.lambda_gan_recon");
    c.lambda_gan_swap = real("swapae.lambda_gan_swap");
    c.lambda_cooccur = real("swapae.lambda_cooccur");
    c.r1_gamma = real("swapae.r1_gamma");
    c.patch_size = static_cast<int>(integer("swapae.patch_size"));
    c.n_ref = static_cast<int>(integer("swapae.n_ref"));
    c.tau = real("swapae.tau");
    c.content_channels = static_cast<int>(integer("swapae.content_channels"));
    c.style_dim = static_cast<int>(integer("swapae.style_dim"));
    c.crop_mode = boolean("ablation.disable_cam_sampling") ? CropMode::uniform : CropMode::bias_tailored;
    const std::string s = str("swapae.seed");
    c.seed = s == "auto" ? derived_seed("swapae") : std::stoull(s);
    return c;
  }

  AugmentationPlan augmentation_plan() const {
    AugmentationPlan p;
    p.pairing = boolean("ablation.disable_separation") ? PairingPolicy::random_pairs : PairingPolicy::guiding_content_contrary_style;
    p.augment_ratio = real("augment.ratio");
    p.class_matching = boolean("augment.class_matching");
    p.seed = derived_seed("augment");
    return p;
  }

 private:
  std::map<std::string, std::string> values_;
  fs::path base_dir_;
};

// ---- stages -----------------------------------------------------------------

enum class Stage { data, biased_train, partition, swapae_train, augment, debias_train, evaluate, report };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::data,    Stage::biased_train, Stage::partition, Stage::swapae_train,
                                    Stage::augment, Stage::debias_train, Stage::evaluate,  Stage::report};
  return s;
}

inline std::string to_string(Stage s) {
  static const char* names[] = {"data", "biased_train", "partition", "swapae_train", "augment", "debias_train", "evaluate", "report"};
  return names[static_cast<int>(s)];
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : all_stages())
    if (to_string(st) == s) return st;
  throw InvalidArgument("unknown stage '" + s + "'");
}

// Configuration prefixes read by a stage, upstream stages included.
inline std::vector<std::string> stage_prefixes(Stage s) {
  std::vector<std::string> p{"seed", "dataset."};
  if (s >= Stage::biased_train) p.insert(p.end(), {"biased.", "partition.snapshot_epoch"});
  if (s >= Stage::partition) p.push_back("partition.");
  if (s >= Stage::swapae_train) p.insert(p.end(), {"swapae.", "augment.class_matching", "ablation."});
  if (s >= Stage::augment) p.push_back("augment.");
  if (s >= Stage::debias_train) p.push_back("debias.");
  if (s >= Stage::evaluate) p.push_back("evaluate.");
  return p;
}

inline constexpr int kStampVersion = 2;

inline std::string stage_hash(const PipelineConfig& c, Stage s) {
  return io::sha256_hex("stage=" + to_string(s) + "\nstamp=" + std::to_string(kStampVersion) + "\n" + c.canonical(stage_prefixes(s)));
}

inline std::string vanilla_hash(const PipelineConfig& c) {
  return io::sha256_hex("vanilla\nstamp=" + std::to_string(kStampVersion) + "\n" + c.canonical({"seed", "dataset.", "debias."}));
}

namespace pipeline_detail {

inline json hash_outputs(const fs::path& dir) {
  json out = json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "stamp.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string bytes = io::read_text(f);
    out[fs::relative(f, dir).generic_string()] = io::sha256_hex(bytes);
  }
  return out;
}

inline void write_stamp(const fs::path& dir, const std::string& name, const std::string& hash, const std::string& config_hash,
                        json extra = json::object()) {
  json stamp{{"stage", name}, {"stage_hash", hash}, {"config_hash", config_hash}, {"outputs", hash_outputs(dir)}};
  stamp.update(extra);
  io::write_text(dir / "stamp.json", stamp.dump(2) + "\n");
}

// True when dir/stamp.json carries `hash` and every listed output is intact.
inline bool stamp_valid(const fs::path& dir, const std::string& hash, bool verify_outputs = true) {
  const fs::path p = dir / "stamp.json";
  if (!fs::exists(p)) return false;
  json stamp;
  try {
    stamp = json::parse(io::read_text(p));
  } catch (const json::exception&) {
    return false;
  }
  if (stamp.value("stage_hash", "") != hash) return false;
  if (!verify_outputs) return true;
  for (const auto& [rel, sha] : stamp.at("outputs").items()) {
    const fs::path f = dir / rel;
    if (!fs::exists(f) || io::sha256_hex(io::read_text(f)) != sha.get<std::string>()) return false;
  }
  return true;
}

// Copies a matching stage directory from a sibling run, if any.
inline bool reuse_from_siblings(const fs::path& run_root, const fs::path& self_run, const fs::path& rel, const std::string& hash,
                                const fs::path& dest) {
  if (!fs::exists(run_root)) return false;
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(run_root))
    if (e.is_directory() && e.path() != self_run) runs.push_back(e.path());
  std::sort(runs.begin(), runs.end());
  for (const auto& r : runs) {
    const fs::path src = r / rel;
    if (stamp_valid(src, hash)) {
      fs::remove_all(dest);
      fs::create_directories(dest.parent_path());
      fs::copy(src, dest, fs::copy_options::recursive);
      return true;
    }
  }
  return false;
}

}  // namespace pipeline_detail

struct StageResult {
  Stage stage;
  enum class Outcome { computed, up_to_date, reused } outcome;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg, std::ostream* log = &std::cerr) : cfg_(std::move(cfg)), log_(log) {}

  const PipelineConfig& config() const { return cfg_; }
  fs::path run_dir() const { return cfg_.run_dir(); }
  fs::path stage_dir(Stage s) const { return run_dir() / to_string(s); }

  StageResult run_stage(Stage s, bool force = false) {
    const fs::path dir = stage_dir(s);
    const std::string hash = stage_hash(cfg_, s);
    check_upstream(s);
    if (!force && pipeline_detail::stamp_valid(dir, hash)) {
      note(to_string(s) + ": up to date");
      return {s, StageResult::Outcome::up_to_date};
    }
    fs::create_directories(run_dir());
    io::write_text(run_dir() / "config.kv", cfg_.canonical());
    if (!force && s != Stage::report && pipeline_detail::reuse_from_siblings(cfg_.run_root(), run_dir(), to_string(s), hash, dir)) {
      note(to_string(s) + ": reused from a sibling run");
      return {s, StageResult::Outcome::reused};
    }
    const fs::path tmp = run_dir() / (to_string(s) + ".tmp");
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    note(to_string(s) + ": running");
    json extra = json::object();
    switch (s) {
      case Stage::data: extra = stage_data(tmp); break;
      case Stage::biased_train: extra = stage_biased_train(tmp); break;
      case Stage::partition: extra = stage_partition(tmp); break;
      case Stage::swapae_train: extra = stage_swapae_train(tmp); break;
      case Stage::augment: extra = stage_augment(tmp); break;
      case Stage::debias_train: extra = stage_debias_train(tmp, force); break;
      case Stage::evaluate: extra = stage_evaluate(tmp); break;
      case Stage::report: extra = stage_report(tmp); break;
    }
    pipeline_detail::write_stamp(tmp, to_string(s), hash, cfg_.hash(), extra);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
    return {s, StageResult::Outcome::computed};
  }

  // Runs every stage in order; returns the metrics report.
  json run_all(bool force = false) {
    for (Stage s : all_stages()) run_stage(s, force);
    return json::parse(io::read_text(stage_dir(Stage::report) / "metrics_report.json"));
  }

 private:
  PipelineConfig cfg_;
  std::ostream* log_;

  void note(const std::string& msg) const {
    if (log_) *log_ << "[" << cfg_.hash().substr(0, 16) << "] " << msg << std::endl;
  }

  void check_upstream(Stage s) const {
    for (Stage u : all_stages()) {
      if (u >= s) break;
      if (!pipeline_detail::stamp_valid(stage_dir(u), stage_hash(cfg_, u), false))
        throw MissingArtifact(to_string(u), to_string(u) + " required: run stage '" + to_string(u) + "' before '" + to_string(s) + "'");
    }
  }

  Dataset load_data() const { return load_manifest(stage_dir(Stage::data) / "dataset"); }
  Dataset load_partitioned_train() const { return load_manifest(stage_dir(Stage::partition) / "dataset"); }

  Partition load_partition(const std::vector<LabeledExample>& train) const {
    const json pj = json::parse(io::read_text(stage_dir(Stage::partition) / "partition.json"));
    Partition p;
    p.threshold = pj.at("threshold").get<double>();
    for (const auto& ex : train) {
      if (!ex.pseudo_bias_label) throw FormatError("example '" + ex.id + "' has no pseudo bias label");
      (*ex.pseudo_bias_label ? p.contrary_ids : p.guiding_ids).insert(ex.id);
      auto& c = p.per_class_counts[ex.target];
      (*ex.pseudo_bias_label ? c.contrary : c.guiding)++;
    }
    return p;
  }

  SourceImages load_source() const {
    const auto spec = cfg_.dataset_spec();
    const fs::path src = cfg_.resolve("dataset.source");
    if (spec.kind == DatasetKind::colored_mnist) return load_mnist_csv(src, static_cast<int>(cfg_.integer("dataset.holdout_per_class")));
    SourceImages s;
    std::vector<fs::path> batches;
    for (int i = 1; i <= 5; ++i) batches.push_back(src / ("data_batch_" + std::to_string(i) + ".bin"));
    std::tie(s.train, s.train_labels) = load_cifar10_binary(batches);
    std::tie(s.test, s.test_labels) = load_cifar10_binary({src / "test_batch.bin"});
    return s;
  }

  json stage_data(const fs::path& out) {
    const auto spec = cfg_.dataset_spec();
    const auto src = load_source();
    const Dataset d = spec.kind == DatasetKind::colored_mnist ? generate_colored_mnist(spec, src) : generate_corrupted_cifar10(spec, src);
    write_manifest(d, out / "dataset");
    const bool roundtrip = load_manifest(out / "dataset") == d;
    if (!roundtrip) throw FormatError("dataset manifest failed its round-trip check");
    std::vector<Image> preview;
    for (std::size_t i = 0; i < std::min<std::size_t>(40, d.split(kTrainSplit).size()); ++i) preview.push_back(d.split(kTrainSplit)[i].image);
    write_ppm(out / "train_preview.ppm", tile_images(preview, 10));
    json counts = json::object();
    for (const auto& [name, v] : d.splits) counts[name] = v.size();
    return {{"roundtrip_identity", roundtrip}, {"split_sizes", counts}};
  }

  json stage_biased_train(const fs::path& out) {
    const Dataset d = load_data();
    const TrainConfig tc = cfg_.biased_train_config();
    auto res = train_classifier(d.split(kTrainSplit), cfg_.classifier_spec("biased"), tc);
    const int snap = tc.snapshot_epochs.front();
    save_classifier(out / "final.ckpt", res.model, tc, tc.epochs);
    save_classifier(out / "snapshot.ckpt", res.snapshots.at(snap), tc, snap);
    write_loss_curve(out / "loss_curve.csv", res.curve);
    return {{"snapshot_epoch", snap}, {"final_train_accuracy", res.curve.back().accuracy}};
  }

  json stage_partition(const fs::path& out) {
    Dataset d = load_data();
    const auto snap = load_classifier(stage_dir(Stage::biased_train) / "snapshot.ckpt");
    auto& train = d.splits.at(kTrainSplit);
    const auto scores = score_examples(snap.model, train);
    const Partition p = assign_pseudo_labels(scores);
    apply_pseudo_labels(p, train);
    const PartitionMetrics m = partition_metrics(p, train);
    const ThresholdReport tr = report_thresholds(p);
    write_partition_csv(out / "partition.csv", scores, p);
    json pj = tr.data;
    pj["metrics"] = to_json(m);
    io::write_text(out / "partition.json", pj.dump(2) + "\n");
    io::write_text(out / "thresholds.txt", tr.text);
    Dataset labelled;
    labelled.spec = d.spec;
    labelled.splits[kTrainSplit] = train;
    write_manifest(labelled, out / "dataset");

    if (snap.model.spec().arch == Arch::conv_gap) {
      const int per_side = static_cast<int>(cfg_.integer("partition.cam_dumps"));
      int g = 0, c = 0;
      for (const auto& ex : train) {
        int& n = *ex.pseudo_bias_label ? c : g;
        if (n >= per_side) continue;
        ++n;
        dump_cam(out / "cams" / (*ex.pseudo_bias_label ? "contrary" : "guiding"), compute_cam(snap.model, ex.image, ex.target, ex.id), ex.image);
      }
    }
    return {{"threshold", p.threshold}, {"f1", m.f1}};
  }

  json stage_swapae_train(const fs::path& out) {
    if (cfg_.boolean("ablation.oracle_swap")) {
      io::write_text(out / "SKIPPED", "oracle_swap is enabled; no SwapAE is trained\n");
      return {{"skipped", true}};
    }
    const Dataset d = load_partitioned_train();
    const auto& train = d.split(kTrainSplit);
    const Partition p = load_partition(train);
    const auto snap = load_classifier(stage_dir(Stage::biased_train) / "snapshot.ckpt");
    const SwapAEConfig sc = cfg_.swapae_config();
    std::shared_ptr<std::vector<PatchDistribution>> dists;
    const Classifier* cam = nullptr;
    if (sc.crop_mode == CropMode::bias_tailored) {
      cam = &snap.model;
      std::vector<const Image*> ims;
      std::vector<int> cls;
      for (const auto& ex : train) {
        ims.push_back(&ex.image);
        cls.push_back(ex.target);
      }
      dists = std::make_shared<std::vector<PatchDistribution>>();
      for (const auto& m : compute_cams(snap.model, ims, cls)) dists->push_back(to_sampling_distribution(m, sc.tau));
    }
    const AugmentationPlan plan = cfg_.augmentation_plan();
    const auto sampler = make_pair_sampler(p, train, plan, sc.batch_size, dists);
    SwapAEState state(sc);
    std::mt19937_64 probe_rng(sc.seed ^ 0xabcdefULL);
    const auto probe = sampler(probe_rng);
    std::vector<const Image*> pc, ps;
    for (const auto& t : probe) {
      pc.push_back(t.content);
      ps.push_back(t.style);
    }
    const long sample_every = cfg_.integer("swapae.sample_every"), ckpt_every = cfg_.integer("swapae.checkpoint_every");
    const auto log = train_swapae(state, sc.steps, sampler, cam, [&](const SwapLosses& l, const SwapAEState& s) {
      if (sample_every > 0 && s.step % sample_every == 0) {
        std::ostringstream name;
        name << "step_" << std::setw(6) << std::setfill('0') << s.step << ".ppm";
        write_sample_grid(out / "samples" / name.str(), s, pc, ps);
      }
      if (ckpt_every > 0 && s.step % ckpt_every == 0) save_swapae(out / "swapae.ckpt", s);
      if (s.step % 500 == 0)
        note("swapae step " + std::to_string(s.step) + " recon " + std::to_string(l.recon) + " cooccur " + std::to_string(l.cooccur));
    });
    save_swapae(out / "swapae.ckpt", state);
    write_swap_losses(out / "losses.csv", log);
    return {{"steps", state.step}, {"crop_mode", to_string(sc.crop_mode)}, {"pairing", to_string(plan.pairing)}};
  }

  json stage_augment(const fs::path& out) {
    const Dataset d = load_partitioned_train();
    const auto& train = d.split(kTrainSplit);
    const Partition p = load_partition(train);
    const AugmentationPlan plan = cfg_.augmentation_plan();
    const auto pairs = build_pairs(p, train, plan);
    const bool oracle = cfg_.boolean("ablation.oracle_swap");
    std::vector<LabeledExample> swapped;
    if (oracle) {
      swapped = oracle_recolor_swap(pairs, d);
    } else {
      const SwapAEState state = load_swapae(stage_dir(Stage::swapae_train) / "swapae.ckpt");
      swapped = generate_bias_swapped(state, pairs, train);
    }
    Dataset aug;
    aug.spec = d.spec;
    aug.splits[kTrainSplit] = union_dataset(train, swapped);
    aug.metadata = {{"augmentation_plan", to_json(plan)}, {"swap_mode", oracle ? "oracle" : "gan"}, {"num_swapped", swapped.size()}};
    write_manifest(aug, out / "dataset");
    std::ostringstream csv;
    csv << "content_id,style_id\n";
    for (const auto& pr : pairs) csv << pr.content_id << ',' << pr.style_id << '\n';
    io::write_text(out / "pairs.csv", csv.str());
    write_contact_sheet(out / "contact_sheet.ppm", swapped, train);
    return {{"num_pairs", pairs.size()}, {"num_swapped", swapped.size()}};
  }

  json stage_debias_train(const fs::path& out, bool force) {
    const TrainConfig tc = cfg_.debias_train_config();
    const ClassifierSpec spec = cfg_.classifier_spec("debias");
    const std::string vh = vanilla_hash(cfg_);
    const fs::path vdir = out / "vanilla";
    bool reused = false;
    if (!force) {
      if (pipeline_detail::stamp_valid(stage_dir(Stage::debias_train) / "vanilla", vh)) {
        fs::copy(stage_dir(Stage::debias_train) / "vanilla", vdir, fs::copy_options::recursive);
        reused = true;
      } else {
        reused = pipeline_detail::reuse_from_siblings(cfg_.run_root(), run_dir(), fs::path("debias_train") / "vanilla", vh, vdir);
      }
    }
    if (!reused) {
      fs::create_directories(vdir);
      const Dataset d = load_data();
      auto res = train_classifier(d.split(kTrainSplit), spec, tc);
      save_classifier(vdir / "model.ckpt", res.model, tc, tc.epochs);
      write_loss_curve(vdir / "loss_curve.csv", res.curve);
      pipeline_detail::write_stamp(vdir, "vanilla", vh, cfg_.hash());
    } else {
      note("debias_train: vanilla baseline reused");
    }
    const Dataset aug = load_manifest(stage_dir(Stage::augment) / "dataset");
    auto res = train_classifier(aug.split(kTrainSplit), spec, tc);
    fs::create_directories(out / "debiased");
    save_classifier(out / "debiased" / "model.ckpt", res.model, tc, tc.epochs);
    write_loss_curve(out / "debiased" / "loss_curve.csv", res.curve);
    return {{"vanilla_reused", reused}, {"augmented_train_size", aug.split(kTrainSplit).size()}};
  }

  json stage_evaluate(const fs::path& out);
  json stage_report(const fs::path& out);
};

// ---- evaluation -----------------------------------------------------------------

struct SplitEvaluation {
  double accuracy = 0;
  std::size_t count = 0;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
};

inline SplitEvaluation evaluate_split(const Classifier& clf, const std::vector<LabeledExample>& examples) {
  SplitEvaluation e;
  const int k = clf.spec().num_classes;
  e.confusion.assign(k, std::vector<int>(k, 0));
  if (examples.empty()) return e;
  const Tensor logits = predict_logits(clf, examples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const int pred = argmax_row(logits, static_cast<int>(i));
    if (examples[i].target < 0 || examples[i].target >= k) throw InvalidArgument("example target outside the classifier's classes");
    ++e.confusion[examples[i].target][pred];
    correct += pred == examples[i].target;
  }
  e.count = examples.size();
  e.accuracy = static_cast<double>(correct) / examples.size();
  return e;
}

struct Evaluation {
  SplitEvaluation unbiased, guiding, contrary;
};

// Top-1 accuracy on the unbiased and bias-guiding splits, plus the
// bias-contrary subset of the unbiased split.
inline Evaluation evaluate(const Classifier& clf, const Dataset& d) {
  for (const auto& [_, v] : d.splits)
    for (const auto& ex : v) clf.check_input(ex.image);
  Evaluation e;
  const auto& unbiased = d.split(kUnbiasedSplit);
  e.unbiased = evaluate_split(clf, unbiased);
  e.guiding = evaluate_split(clf, d.split(kGuidingSplit));
  std::vector<LabeledExample> contrary;
  for (const auto& ex : unbiased)
    if (ex.gt_bias_flag.value_or(false)) contrary.push_back(ex);
  e.contrary = evaluate_split(clf, contrary);
  return e;
}

inline json to_json(const Evaluation& e) {
  auto split = [](const SplitEvaluation& s) { return json{{"accuracy", s.accuracy}, {"count", s.count}, {"confusion", s.confusion}}; };
  return json{{"unbiased", split(e.unbiased)}, {"bias_guiding", split(e.guiding)}, {"bias_contrary", split(e.contrary)}};
}

// Fraction of (guiding content, contrary style) pairs whose swap output shows
// the style's colour as its dominant foreground hue.
inline std::pair<std::size_t, double> hue_probe(const SwapAEState& state, const Dataset& d, int n_pairs, std::uint64_t seed) {
  if (d.spec.kind != DatasetKind::colored_mnist) throw InvalidArgument("hue probe needs colored_mnist");
  const auto& train = d.split(kTrainSplit);
  std::map<int, std::vector<const LabeledExample*>> guiding, contrary;
  for (const auto& ex : train) {
    if (!ex.gt_bias_flag || !ex.bias_attribute) continue;
    (*ex.gt_bias_flag ? contrary : guiding)[ex.target].push_back(&ex);
  }
  std::vector<int> classes;
  for (const auto& [c, v] : contrary)
    if (!v.empty() && !guiding[c].empty()) classes.push_back(c);
  if (classes.empty() || n_pairs <= 0) return {0, 0.0};
  std::mt19937_64 rng(seed);
  std::vector<const Image*> content, style;
  std::vector<int> want;
  for (int i = 0; i < n_pairs; ++i) {
    const int c = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
    const auto& g = guiding[c];
    const auto& s = contrary[c];
    content.push_back(&g[std::uniform_int_distribution<std::size_t>(0, g.size() - 1)(rng)]->image);
    const auto* st = s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)];
    style.push_back(&st->image);
    want.push_back(*st->bias_attribute);
  }
  const auto out = swap_generate_batch(state, content, style);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < out.size(); ++i) hit += dominant_palette_index(out[i], d.spec.attributes) == want[i];
  return {out.size(), static_cast<double>(hit) / out.size()};
}

inline json Pipeline::stage_evaluate(const fs::path& out) {
  const Dataset d = load_data();
  const auto vanilla = load_classifier(stage_dir(Stage::debias_train) / "vanilla" / "model.ckpt");
  const auto debiased = load_classifier(stage_dir(Stage::debias_train) / "debiased" / "model.ckpt");
  json ev{{"vanilla", to_json(evaluate(vanilla.model, d))}, {"debiased", to_json(evaluate(debiased.model, d))}};
  if (!cfg_.boolean("ablation.oracle_swap") && d.spec.kind == DatasetKind::colored_mnist) {
    const SwapAEState state = load_swapae(stage_dir(Stage::swapae_train) / "swapae.ckpt");
    const auto [n, frac] = hue_probe(state, d, static_cast<int>(cfg_.integer("evaluate.probe_pairs")), cfg_.derived_seed("probe"));
    ev["swap_probe"] = {{"pairs", n}, {"hue_transfer", frac}};
  }
  io::write_text(out / "evaluation.json", ev.dump(2) + "\n");
  for (const char* who : {"vanilla", "debiased"}) {
    std::ostringstream csv;
    for (const auto& row : ev[who]["unbiased"]["confusion"]) {
      for (std::size_t j = 0; j < row.size(); ++j) csv << (j ? "," : "") << row[j].get<int>();
      csv << '\n';
    }
    io::write_text(out / (std::string(who) + "_unbiased_confusion.csv"), csv.str());
  }
  return {{"debiased_unbiased_accuracy", ev["debiased"]["unbiased"]["accuracy"]}};
}

// ---- reporting -------------------------------------------------------------------

inline const json& metrics_report_schema() {
  static const json s = json::parse(kMetricsReportSchemaV1);
  return s;
}

inline void validate_report(const json& report) {
  const auto errors = schema::validate(report, metrics_report_schema());
  if (!errors.empty()) {
    std::string msg = "metrics report violates schema v1:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw InvalidArgument(msg);
  }
}

namespace pipeline_detail {

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// Unbiased accuracy against bias ratio, one series per (model, ablation tag, swap mode).
inline std::string accuracy_plot_svg(const std::vector<json>& reports) {
  std::set<double> ratios;
  std::map<std::string, std::map<double, std::vector<double>>> series;
  for (const auto& r : reports) {
    const double ratio = r["dataset"]["bias_ratio"].get<double>();
    ratios.insert(ratio);
    const std::string suffix = " (" + r["ablation_tag"].get<std::string>() + ", " + r["swap_mode"].get<std::string>() + ")";
    series["vanilla"][ratio].push_back(r["vanilla"]["unbiased_accuracy"].get<double>());
    series["debiased" + suffix][ratio].push_back(r["debiased"]["unbiased_accuracy"].get<double>());
  }
  const double W = 640, H = 400, L = 60, R = 220, T = 30, B = 50;
  const std::vector<double> xs(ratios.begin(), ratios.end());
  auto px = [&](double ratio) {
    const auto i = std::find(xs.begin(), xs.end(), ratio) - xs.begin();
    return xs.size() == 1 ? L + (W - L - R) / 2 : L + (W - L - R) * static_cast<double>(i) / (xs.size() - 1);
  };
  auto py = [&](double acc) { return T + (H - T - B) * (1.0 - acc); };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\">Unbiased accuracy vs. bias ratio</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 10; t += 2)
    s << "<text class=\"ytick\" x=\"" << L - 6 << "\" y=\"" << py(t / 10.0) + 4 << "\" text-anchor=\"end\">" << fmt(t / 10.0, 1) << "</text>\n";
  for (double x : xs)
    s << "<text class=\"xtick\" x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(x, 3) << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">bias ratio</text>\n";
  int idx = 0;
  for (const auto& [name, pts] : series) {
    const char* col = colours[idx % 8];
    std::ostringstream poly;
    for (const auto& [ratio, accs] : pts) {
      double m = 0;
      for (double a : accs) m += a;
      m /= accs.size();
      poly << px(ratio) << ',' << py(m) << ' ';
      s << "<circle class=\"point\" cx=\"" << px(ratio) << "\" cy=\"" << py(m) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    }
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"" << poly.str() << "\"/>\n";
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 14 * idx + 10 << "\" fill=\"" << col << "\">" << name << "</text>\n";
    ++idx;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace pipeline_detail

// Writes reports.json, summary.txt and accuracy_vs_bias_ratio.svg into `dir`.
// Replicates sharing (ablation tag, swap mode, bias ratio) are summarised by
// mean and standard deviation.
inline void emit_report(const std::vector<json>& reports, const fs::path& dir) {
  if (reports.empty()) throw InvalidArgument("emit_report needs at least one report");
  for (const auto& r : reports) validate_report(r);
  io::write_text(dir / "reports.json", json(reports).dump(2) + "\n");
  std::map<std::string, std::vector<const json*>> groups;
  for (const auto& r : reports)
    groups[r["ablation_tag"].get<std::string>() + " | " + r["swap_mode"].get<std::string>() + " | bias ratio " +
           pipeline_detail::fmt(r["dataset"]["bias_ratio"].get<double>(), 3)]
        .push_back(&r);
  std::ostringstream s;
  s << "Debiasing report (" << reports.size() << " run" << (reports.size() == 1 ? "" : "s") << ")\n";
  auto stats = [](const std::vector<const json*>& g, auto get) {
    double m = 0, v = 0;
    for (const auto* r : g) m += get(*r);
    m /= g.size();
    for (const auto* r : g) v += (get(*r) - m) * (get(*r) - m);
    return std::pair{m, g.size() > 1 ? std::sqrt(v / (g.size() - 1)) : 0.0};
  };
  for (const auto& [key, g] : groups) {
    s << "\n" << key << "  (n=" << g.size() << ")\n";
    auto line = [&](const char* label, auto get) {
      const auto [m, sd] = stats(g, get);
      s << "  " << std::left << std::setw(34) << label << pipeline_detail::fmt(m) << "  +/- " << pipeline_detail::fmt(sd) << "\n";
    };
    line("vanilla unbiased accuracy", [](const json& r) { return r["vanilla"]["unbiased_accuracy"].get<double>(); });
    line("vanilla bias-guiding accuracy", [](const json& r) { return r["vanilla"]["bias_guiding_accuracy"].get<double>(); });
    line("debiased unbiased accuracy", [](const json& r) { return r["debiased"]["unbiased_accuracy"].get<double>(); });
    line("debiased bias-guiding accuracy", [](const json& r) { return r["debiased"]["bias_guiding_accuracy"].get<double>(); });
    line("unbiased accuracy delta", [](const json& r) { return r["delta_unbiased_accuracy"].get<double>(); });
    line("partition F1", [](const json& r) { return r["partition"]["f1"].get<double>(); });
    line("partition threshold", [](const json& r) { return r["partition"]["threshold"].get<double>(); });
    if (std::all_of(g.begin(), g.end(), [](const json* r) { return r->contains("swap_probe"); }))
      line("swap hue transfer", [](const json& r) { return r["swap_probe"]["hue_transfer"].get<double>(); });
    for (const auto* r : g) s << "  config " << (*r)["config_hash"].get<std::string>() << "\n";
  }
  io::write_text(dir / "summary.txt", s.str());
  io::write_text(dir / "accuracy_vs_bias_ratio.svg", pipeline_detail::accuracy_plot_svg(reports));
}

inline json Pipeline::stage_report(const fs::path& out) {
  const json ev = json::parse(io::read_text(stage_dir(Stage::evaluate) / "evaluation.json"));
  const json pj = json::parse(io::read_text(stage_dir(Stage::partition) / "partition.json"));
  const json aug = json::parse(io::read_text(stage_dir(Stage::augment) / "stamp.json"));
  const auto spec = cfg_.dataset_spec();
  auto acc = [&](const char* who) {
    return json{{"unbiased_accuracy", ev[who]["unbiased"]["accuracy"]},
                {"bias_guiding_accuracy", ev[who]["bias_guiding"]["accuracy"]},
                {"bias_contrary_accuracy", ev[who]["bias_contrary"]["accuracy"]}};
  };
  json config = json::object();
  for (const auto& [k, v] : cfg_.values())
    if (k != "output.root") config[k] = v;
  json report{{"schema_version", 1},
              {"config_hash", cfg_.hash()},
              {"config", config},
              {"ablation_tag", cfg_.ablation_tag()},
              {"swap_mode", cfg_.boolean("ablation.oracle_swap") ? "oracle" : "gan"},
              {"seed", cfg_.integer("seed")},
              {"dataset",
               {{"kind", to_string(spec.kind)},
                {"bias_ratio", spec.bias_ratio},
                {"num_train", spec.sizes.train},
                {"num_augmented", aug.at("num_swapped")}}},
              {"vanilla", acc("vanilla")},
              {"debiased", acc("debiased")},
              {"delta_unbiased_accuracy",
               ev["debiased"]["unbiased"]["accuracy"].get<double>() - ev["vanilla"]["unbiased"]["accuracy"].get<double>()},
              {"partition",
               {{"precision", pj["metrics"]["precision"]},
                {"recall", pj["metrics"]["recall"]},
                {"f1", pj["metrics"]["f1"]},
                {"threshold", pj["threshold"]},
                {"num_contrary", pj["num_contrary"]}}},
              {"loss_curves",
               {{"biased", "biased_train/loss_curve.csv"},
                {"vanilla", "debias_train/vanilla/loss_curve.csv"},
                {"debiased", "debias_train/debiased/loss_curve.csv"}}}};
  if (!cfg_.boolean("ablation.oracle_swap")) report["loss_curves"]["swapae"] = "swapae_train/losses.csv";
  if (ev.contains("swap_probe")) report["swap_probe"] = ev["swap_probe"];
  validate_report(report);
  io::write_text(out / "metrics_report.json", report.dump(2) + "\n");
  emit_report({report}, out);
  return {{"delta_unbiased_accuracy", report["delta_unbiased_accuracy"]}};
}

// ---- ablations -------------------------------------------------------------------

enum class Ablation { c1, c2 };

inline Ablation parse_ablation(const std::string& s) {
  if (s == "c1") return Ablation::c1;
  if (s == "c2") return Ablation::c2;
  throw InvalidArgument("unknown ablation '" + s + "' (expected c1 or c2)");
}

inline PipelineConfig ablated(PipelineConfig c, Ablation which) {
  c.set(which == Ablation::c1 ? "ablation.disable_separation" : "ablation.disable_cam_sampling", "true");
  return c;
}

// Runs the base configuration and its ablation with everything else fixed.
inline std::pair<json, json> run_ablation(const PipelineConfig& base, Ablation which, std::ostream* log = &std::cerr) {
  Pipeline full(base, log), ab(ablated(base, which), log);
  json a = full.run_all();
  json b = ab.run_all();
  return {a, b};
}

}  // namespace biaswap
