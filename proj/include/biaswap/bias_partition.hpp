#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "biaswap/classifiers.hpp"

namespace biaswap {

struct BiasScoreRecord {
  std::string example_id;
  int target = 0;
  double score = 0;
  bool correct = false;
  double max_prob = 0;
  bool operator==(const BiasScoreRecord&) const = default;
};

inline BiasScoreRecord bias_score(std::span<const float> logits, int target, std::string example_id = {}) {
  const int k = static_cast<int>(logits.size());
  if (k < 2) throw InvalidArgument("bias_score needs at least two classes");
  if (target < 0 || target >= k) throw InvalidArgument("bias_score: target outside [0,K)");
  for (float z : logits)
    if (!std::isfinite(z)) throw InvalidArgument("bias_score: non-finite logit for example '" + example_id + "'");
  int arg = 0;
  double mx = logits[0];
  for (int j = 1; j < k; ++j)
    if (logits[j] > mx) mx = logits[arg = j];
  double z = 0;
  for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
  BiasScoreRecord r;
  r.example_id = std::move(example_id);
  r.target = target;
  r.max_prob = 1.0 / z;
  r.correct = arg == target;
  r.score = std::abs((r.correct ? 1.0 : 0.0) - r.max_prob);
  return r;
}

// Scores every example with a frozen classifier in one pass.
inline std::vector<BiasScoreRecord> score_examples(const Classifier& clf, const std::vector<LabeledExample>& examples) {
  const Tensor logits = predict_logits(clf, examples);
  const int k = logits.dim(1);
  std::vector<BiasScoreRecord> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i)
    out.push_back(bias_score(std::span<const float>(logits.data() + i * k, k), examples[i].target, examples[i].id));
  return out;
}

struct ClassCounts {
  int guiding = 0;
  int contrary = 0;
  bool operator==(const ClassCounts&) const = default;
};

struct Partition {
  double threshold = 0;
  std::set<std::string> guiding_ids;
  std::set<std::string> contrary_ids;
  std::map<int, ClassCounts> per_class_counts;

  bool is_contrary(const std::string& id) const { return contrary_ids.count(id) > 0; }
  bool operator==(const Partition&) const = default;
};

// Global-mean threshold; strictly above the mean is bias-contrary. The mean is
// accumulated over sorted scores so the result does not depend on input order.
inline Partition assign_pseudo_labels(std::span<const BiasScoreRecord> scores) {
  if (scores.empty()) throw InvalidArgument("assign_pseudo_labels: empty score list");
  std::vector<double> sorted;
  sorted.reserve(scores.size());
  for (const auto& r : scores) sorted.push_back(r.score);
  std::sort(sorted.begin(), sorted.end());
  double sum = 0;
  for (double s : sorted) sum += s;
  Partition p;
  p.threshold = sum / static_cast<double>(scores.size());
  for (const auto& r : scores) {
    const bool contrary = r.score > p.threshold;
    auto& ids = contrary ? p.contrary_ids : p.guiding_ids;
    if (!ids.insert(r.example_id).second || (contrary ? p.guiding_ids : p.contrary_ids).count(r.example_id))
      throw InvalidArgument("duplicate example id '" + r.example_id + "' in score list");
    auto& c = p.per_class_counts[r.target];
    (contrary ? c.contrary : c.guiding)++;
  }
  return p;
}

inline void apply_pseudo_labels(const Partition& p, std::vector<LabeledExample>& examples) {
  for (auto& ex : examples) {
    if (p.contrary_ids.count(ex.id))
      ex.pseudo_bias_label = 1;
    else if (p.guiding_ids.count(ex.id))
      ex.pseudo_bias_label = 0;
  }
}

struct PartitionMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  struct Side {
    double precision = 0, recall = 0, f1 = 0;
    int tp = 0, fp = 0, fn = 0;
  } guiding, contrary;
};

inline PartitionMetrics partition_metrics(const Partition& p, const std::vector<LabeledExample>& examples) {
  std::map<std::string, bool> truth;
  for (const auto& ex : examples)
    if (ex.gt_bias_flag) truth[ex.id] = *ex.gt_bias_flag;
  PartitionMetrics m;
  auto tally = [&](const std::set<std::string>& ids, bool predicted_contrary) {
    for (const auto& id : ids) {
      auto it = truth.find(id);
      if (it == truth.end()) throw InvalidArgument("no ground-truth bias flag for example '" + id + "'");
      const bool actual = it->second;
      auto& pos = predicted_contrary ? m.contrary : m.guiding;
      auto& neg = predicted_contrary ? m.guiding : m.contrary;
      if (actual == predicted_contrary) {
        ++pos.tp;
      } else {
        ++pos.fp;
        ++neg.fn;
      }
    }
  };
  tally(p.guiding_ids, false);
  tally(p.contrary_ids, true);
  for (auto* s : {&m.guiding, &m.contrary}) {
    s->precision = s->tp + s->fp ? static_cast<double>(s->tp) / (s->tp + s->fp) : 0.0;
    s->recall = s->tp + s->fn ? static_cast<double>(s->tp) / (s->tp + s->fn) : 0.0;
    s->f1 = s->precision + s->recall > 0 ? 2 * s->precision * s->recall / (s->precision + s->recall) : 0.0;
  }
  m.precision = (m.guiding.precision + m.contrary.precision) / 2;
  m.recall = (m.guiding.recall + m.contrary.recall) / 2;
  m.f1 = (m.guiding.f1 + m.contrary.f1) / 2;
  return m;
}

inline json to_json(const PartitionMetrics& m) {
  auto side = [](const PartitionMetrics::Side& s) {
    return json{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}};
  };
  return json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"guiding", side(m.guiding)}, {"contrary", side(m.contrary)}};
}

struct ThresholdReport {
  json data;
  std::string text;
};

inline ThresholdReport report_thresholds(const Partition& p) {
  ThresholdReport r;
  const std::size_t n = p.guiding_ids.size() + p.contrary_ids.size();
  r.data = {{"threshold", p.threshold},
            {"num_examples", n},
            {"num_contrary", p.contrary_ids.size()},
            {"contrary_fraction", n ? static_cast<double>(p.contrary_ids.size()) / n : 0.0},
            {"per_class", json::array()}};
  std::ostringstream os;
  os.precision(6);
  os << "threshold (mean bias score): " << p.threshold << "\n"
     << "contrary: " << p.contrary_ids.size() << " / " << n << "\n";
  for (const auto& [cls, c] : p.per_class_counts) {
    const int tot = c.guiding + c.contrary;
    const double frac = tot ? static_cast<double>(c.contrary) / tot : 0.0;
    r.data["per_class"].push_back({{"class", cls}, {"guiding", c.guiding}, {"contrary", c.contrary}, {"contrary_fraction", frac}});
    os << "  class " << cls << ": " << c.contrary << " contrary of " << tot << " (" << frac << ")\n";
  }
  r.text = os.str();
  return r;
}

inline void write_partition_csv(const fs::path& path, std::span<const BiasScoreRecord> scores, const Partition& p) {
  std::ostringstream os;
  os.precision(17);
  os << "example_id,score,pseudo_bias_label\n";
  for (const auto& r : scores) os << r.example_id << ',' << r.score << ',' << (p.is_contrary(r.example_id) ? 1 : 0) << '\n';
  io::write_text(path, os.str());
}

}  // namespace biaswap
