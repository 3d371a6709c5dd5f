#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "biaswap/autograd.hpp"
#include "biaswap/dataset.hpp"
#include "biaswap/nn.hpp"

namespace biaswap {

enum class Arch { conv_gap, mlp3 };

inline std::string to_string(Arch a) { return a == Arch::conv_gap ? "conv_gap" : "mlp3"; }
inline Arch parse_arch(const std::string& s) {
  if (s == "conv_gap") return Arch::conv_gap;
  if (s == "mlp3") return Arch::mlp3;
  throw InvalidArgument("unknown architecture '" + s + "'");
}

struct ClassifierSpec {
  Arch arch = Arch::conv_gap;
  int num_classes = 10;
  int height = 28;
  int width = 28;
  int channels = 3;
  std::vector<int> conv_channels{16, 32, 64, 128};  // conv_gap: 4 blocks, strides 1,2,2,1
  int hidden = 100;                               // mlp3 hidden width
  bool operator==(const ClassifierSpec&) const = default;
};

enum class LossKind { gce, ce };

inline std::string to_string(LossKind l) { return l == LossKind::gce ? "gce" : "ce"; }
inline LossKind parse_loss(const std::string& s) {
  if (s == "gce") return LossKind::gce;
  if (s == "ce") return LossKind::ce;
  throw InvalidArgument("unknown loss '" + s + "'");
}

struct TrainConfig {
  LossKind loss = LossKind::gce;
  double q = 0.7;
  int epochs = 200;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  std::vector<int> snapshot_epochs{50};
  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (loss == LossKind::gce && !(q > 0.0 && q <= 1.0)) throw InvalidArgument("GCE q must lie in (0,1]");
    if (epochs <= 0 || batch_size <= 0 || learning_rate <= 0) throw InvalidArgument("epochs, batch_size and learning_rate must be positive");
  }
};

inline json to_json(const ClassifierSpec& s) {
  return json{{"arch", to_string(s.arch)}, {"num_classes", s.num_classes}, {"input_shape", {s.height, s.width, s.channels}},
              {"conv_channels", s.conv_channels}, {"hidden", s.hidden}};
}
inline ClassifierSpec classifier_spec_from_json(const json& j) {
  ClassifierSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.num_classes = j.at("num_classes").get<int>();
  const auto shape = j.at("input_shape").get<std::vector<int>>();
  s.height = shape.at(0);
  s.width = shape.at(1);
  s.channels = shape.at(2);
  s.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  s.hidden = j.at("hidden").get<int>();
  return s;
}
inline json to_json(const TrainConfig& c) {
  return json{{"loss", to_string(c.loss)}, {"q", c.q},       {"epochs", c.epochs}, {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate}, {"betas", {c.beta1, c.beta2}}, {"seed", c.seed}, {"snapshot_epochs", c.snapshot_epochs}};
}
inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.loss = parse_loss(j.at("loss").get<std::string>());
  c.q = j.at("q").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("betas").at(0).get<double>();
  c.beta2 = j.at("betas").at(1).get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.snapshot_epochs = j.at("snapshot_epochs").get<std::vector<int>>();
  return c;
}

// Spatial activations of the last conv block plus the linear head that maps
// their global average to logits.
struct FeatureMaps {
  Tensor maps;     // [N, C, h, w]
  Tensor weights;  // [K, C]
  Tensor bias;     // [K]
};

class Classifier {
 public:
  Classifier(ClassifierSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.num_classes < 2) throw InvalidArgument("classifier needs at least two classes");
    std::mt19937_64 rng(seed);
    if (spec_.arch == Arch::conv_gap) {
      if (spec_.conv_channels.size() != 4) throw InvalidArgument("conv_gap expects four conv blocks");
      static constexpr int kStrides[4] = {1, 2, 2, 1};
      int in = spec_.channels;
      for (std::size_t i = 0; i < 4; ++i) {
        convs_.emplace_back(in, spec_.conv_channels[i], 3, kStrides[i], 1, rng);
        in = spec_.conv_channels[i];
      }
      head_ = nn::Linear(in, spec_.num_classes, rng);
    } else {
      int in = spec_.height * spec_.width * spec_.channels;
      for (int i = 0; i < 3; ++i) {
        hidden_.emplace_back(in, spec_.hidden, rng, std::sqrt(2.0f));
        in = spec_.hidden;
      }
      head_ = nn::Linear(in, spec_.num_classes, rng);
    }
  }

  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;
  Classifier(Classifier&&) = default;
  Classifier& operator=(Classifier&&) = default;

  Classifier clone() const {
    Classifier c(spec_, 0);
    const auto src = parameters(), dst = c.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) nn::Var(dst[i].var).mutable_value() = src[i].var.value();
    return c;
  }

  const ClassifierSpec& spec() const { return spec_; }

  nn::ParamList parameters() const {
    nn::ParamList out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "conv" + std::to_string(i));
    for (std::size_t i = 0; i < hidden_.size(); ++i) hidden_[i].collect(out, "fc" + std::to_string(i));
    head_.collect(out, "head");
    return out;
  }

  // Cumulative stride from input pixels to the final feature grid.
  int feature_stride() const { return spec_.arch == Arch::conv_gap ? 4 : 0; }

  // x: normalized NCHW batch. Returns logits [N,K].
  ag::Var forward(const ag::Var& x) const {
    if (spec_.arch == Arch::conv_gap) return head_(ag::global_avg_pool(trunk(x)));
    ag::Var h = ag::flatten(x);
    for (const auto& l : hidden_) h = ag::relu(l(h));
    return head_(h);
  }

  // Final spatial feature maps f_k(x,y); conv_gap only.
  ag::Var trunk(const ag::Var& x) const {
    if (spec_.arch != Arch::conv_gap) throw Unsupported("feature maps are only defined for conv_gap classifiers");
    ag::Var h = x;
    for (const auto& c : convs_) h = ag::relu(c(h));
    return h;
  }

  const nn::Linear& head() const { return head_; }

  void check_input(const Image& im) const {
    if (im.height != spec_.height || im.width != spec_.width || im.channels != spec_.channels)
      throw InvalidArgument("image shape " + std::to_string(im.height) + "x" + std::to_string(im.width) + "x" +
                            std::to_string(im.channels) + " does not match classifier input");
  }

 private:
  ClassifierSpec spec_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::Linear> hidden_;
  nn::Linear head_;
};

// ---- losses -----------------------------------------------------------------

// (1 - p_y^q) / q on an explicit probability vector; p_y is clamped at 1e-12.
inline double gce_loss(std::span<const double> probabilities, int target, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw InvalidArgument("GCE q must lie in (0,1]");
  if (target < 0 || target >= static_cast<int>(probabilities.size())) throw InvalidArgument("target outside [0,K)");
  const double s = std::accumulate(probabilities.begin(), probabilities.end(), 0.0);
  if (std::abs(s - 1.0) > 1e-6) throw InvalidArgument("probabilities do not sum to 1");
  const double py = std::max(probabilities[target], ag::kProbEps);
  return (1.0 - std::pow(py, q)) / q;
}

// Max over logit coordinates of |dGCE - p_y^q dCE| / (|dCE| + eps), with both
// gradients taken through the library's autodiff in float32.
inline double gce_gradient_check(std::span<const float> logits, int target, double q, double eps = 1e-8) {
  const int k = static_cast<int>(logits.size());
  auto grad_of = [&](bool gce) {
    ag::Var z(Tensor({1, k}, std::vector<float>(logits.begin(), logits.end())), true);
    ag::Var loss = gce ? ag::generalized_cross_entropy(z, {target}, q) : ag::cross_entropy(z, {target});
    ag::backward(loss);
    return z.grad();
  };
  const Tensor g_gce = grad_of(true), g_ce = grad_of(false);
  const auto p = ag::detail::softmax_rows(Tensor({1, k}, std::vector<float>(logits.begin(), logits.end())));
  const double w = std::pow(std::max(p[target], ag::kProbEps), q);
  double worst = 0;
  for (int j = 0; j < k; ++j) worst = std::max(worst, std::abs(g_gce[j] - w * g_ce[j]) / (std::abs(g_ce[j]) + eps));
  return worst;
}

// ---- inference --------------------------------------------------------------

namespace detail {

template <class Get>
Tensor batched_logits(const Classifier& clf, std::size_t n, Get get, int batch = 256) {
  Tensor out({static_cast<int>(n), clf.spec().num_classes});
  std::vector<const Image*> ptrs;
  for (std::size_t start = 0; start < n; start += batch) {
    ptrs.clear();
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) {
      ptrs.push_back(&get(i));
      clf.check_input(*ptrs.back());
    }
    const ag::Var logits = clf.forward(ag::Var(to_batch(std::span<const Image* const>(ptrs), true)));
    std::copy(logits.value().vec().begin(), logits.value().vec().end(), out.data() + start * clf.spec().num_classes);
  }
  return out;
}

}  // namespace detail

inline Tensor predict_logits(const Classifier& clf, std::span<const Image> batch) {
  return detail::batched_logits(clf, batch.size(), [&](std::size_t i) -> const Image& { return batch[i]; });
}

inline Tensor predict_logits(const Classifier& clf, const std::vector<LabeledExample>& examples) {
  return detail::batched_logits(clf, examples.size(), [&](std::size_t i) -> const Image& { return examples[i].image; });
}

inline FeatureMaps feature_maps(const Classifier& clf, std::span<const Image> batch) {
  if (clf.spec().arch != Arch::conv_gap) throw Unsupported("feature_maps requires a conv_gap classifier");
  for (const auto& im : batch) clf.check_input(im);
  std::vector<const Image*> ptrs;
  for (const auto& im : batch) ptrs.push_back(&im);
  FeatureMaps f;
  f.maps = clf.trunk(ag::Var(to_batch(std::span<const Image* const>(ptrs), true))).value();
  f.weights = clf.head().weight.value();
  f.bias = clf.head().bias.value();
  return f;
}

inline int argmax_row(const Tensor& logits, int row) {
  const int k = logits.dim(1);
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (logits[row * k + j] > logits[row * k + best]) best = j;
  return best;
}

// ---- training ----------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double accuracy = 0;
  bool operator==(const EpochStats&) const = default;
};

struct TrainResult {
  Classifier model;
  std::map<int, Classifier> snapshots;  // epoch -> parameters after that epoch
  std::vector<EpochStats> curve;
};

inline TrainResult train_classifier(const std::vector<const LabeledExample*>& data, const ClassifierSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw InvalidArgument("train_classifier: empty dataset");
  for (const auto* ex : data)
    if (ex->target < 0 || ex->target >= spec.num_classes) throw InvalidArgument("example " + ex->id + " has target outside [0,K)");
  TrainResult res{Classifier(spec, cfg.seed), {}, {}};
  for (const auto* ex : data) res.model.check_input(ex->image);
  nn::Adam opt(res.model.parameters(), {cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8});
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const Image*> ptrs;
  std::vector<int> targets;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      ptrs.clear();
      targets.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        ptrs.push_back(&data[order[i]]->image);
        targets.push_back(data[order[i]]->target);
      }
      const ag::Var logits = res.model.forward(ag::Var(to_batch(std::span<const Image* const>(ptrs), true)));
      const ag::Var loss = cfg.loss == LossKind::gce ? ag::generalized_cross_entropy(logits, targets, cfg.q)
                                                     : ag::cross_entropy(logits, targets);
      if (!std::isfinite(loss.item()))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index));
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      loss_sum += static_cast<double>(loss.item()) * ptrs.size();
      for (int i = 0; i < static_cast<int>(ptrs.size()); ++i) correct += argmax_row(logits.value(), i) == targets[i];
    }
    res.curve.push_back({epoch, loss_sum / data.size(), static_cast<double>(correct) / data.size()});
    if (std::find(cfg.snapshot_epochs.begin(), cfg.snapshot_epochs.end(), epoch) != cfg.snapshot_epochs.end())
      res.snapshots.emplace(epoch, res.model.clone());
  }
  return res;
}

inline TrainResult train_classifier(const std::vector<LabeledExample>& data, const ClassifierSpec& spec, const TrainConfig& cfg) {
  std::vector<const LabeledExample*> ptrs;
  for (const auto& ex : data) ptrs.push_back(&ex);
  return train_classifier(ptrs, spec, cfg);
}

// ---- persistence -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ClassifierCheckpoint {
  Classifier model;
  TrainConfig config;
  int epoch = 0;
};

inline void save_classifier(const fs::path& path, const Classifier& clf, const TrainConfig& cfg, int epoch) {
  io::BinaryWriter w(path, "BSCK", kCheckpointVersion);
  w.str(json{{"spec", to_json(clf.spec())}, {"train_config", to_json(cfg)}, {"epoch", epoch}}.dump());
  nn::write_params(w, clf.parameters());
  w.close();
}

inline ClassifierCheckpoint load_classifier(const fs::path& path) {
  io::BinaryReader r(path, "BSCK", kCheckpointVersion);
  json meta;
  try {
    meta = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  ClassifierCheckpoint ck{Classifier(classifier_spec_from_json(meta.at("spec")), 0), train_config_from_json(meta.at("train_config")),
                          meta.at("epoch").get<int>()};
  nn::read_params(r, ck.model.parameters());
  return ck;
}

inline void write_loss_curve(const fs::path& path, const std::vector<EpochStats>& curve) {
  std::ostringstream os;
  os << "epoch,loss,accuracy\n";
  os.precision(9);
  for (const auto& e : curve) os << e.epoch << ',' << e.loss << ',' << e.accuracy << '\n';
  io::write_text(path, os.str());
}

}  // namespace biaswap
