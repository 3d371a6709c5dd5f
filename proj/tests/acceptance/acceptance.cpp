// Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.
//
//   acceptance --work-dir DIR [--only 1,2,5]

#include <CLI11.hpp>

#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>

#include "biaswap/pipeline.hpp"

using namespace biaswap;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

PipelineConfig desk_config(const fs::path& root, int seed, bool oracle) {
  auto c = PipelineConfig::load(fs::path(BIASWAP_SOURCE_DIR) / "configs" / "desk.conf");
  c.set("output.root", root.string()).set("seed", std::to_string(seed)).set("ablation.oracle_swap", oracle ? "true" : "false");
  return c;
}

double unbiased(const json& report, const char* who) { return report.at(who).at("unbiased_accuracy").get<double>(); }

double chi_square_pvalue(const std::vector<long>& observed, const std::vector<double>& probabilities) {
  long n = 0;
  for (long o : observed) n += o;
  double chi2 = 0;
  int df = -1;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (probabilities[i] <= 0) continue;
    const double e = n * probabilities[i];
    chi2 += (observed[i] - e) * (observed[i] - e) / e;
    ++df;
  }
  return Eigen::numext::igammac(df / 2.0, chi2 / 2.0);
}

class Acceptance {
 public:
  explicit Acceptance(fs::path work) : work_(std::move(work)) {}

  Outcome gce_gradient_identity() {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> z(0.0f, 3.0f);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
      const int k = std::uniform_int_distribution<int>(2, 12)(rng);
      std::vector<float> logits(k);
      for (auto& v : logits) v = z(rng);
      const int target = std::uniform_int_distribution<int>(0, k - 1)(rng);
      worst = std::max(worst, gce_gradient_check(logits, target, std::array{0.3, 0.7, 1.0}[i % 3], 1e-8));
    }
    return {worst <= 1e-5, "max relative deviation " + sci(worst) + " over 1000 triples (limit 1e-5)"};
  }

  Outcome bias_score_oracle() {
    auto brute = [](const std::vector<float>& logits, int target) {
      long double m = logits[0], z = 0, pmax = 0;
      for (float v : logits) m = std::max<long double>(m, v);
      for (float v : logits) z += std::exp(static_cast<long double>(v) - m);
      int arg = 0;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        const long double p = std::exp(static_cast<long double>(logits[j]) - m) / z;
        if (p > pmax) {
          pmax = p;
          arg = static_cast<int>(j);
        }
      }
      return static_cast<double>(std::fabs((arg == target ? 1.0L : 0.0L) - pmax));
    };
    std::mt19937_64 rng(2);
    std::normal_distribution<float> z(0.0f, 4.0f);
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
      std::vector<float> logits(2 + i % 11);
      for (auto& v : logits) v = z(rng);
      const int t = std::uniform_int_distribution<int>(0, static_cast<int>(logits.size()) - 1)(rng);
      worst = std::max(worst, std::abs(bias_score(logits, t).score - brute(logits, t)));
    }
    const auto a = bias_score(std::vector<float>{static_cast<float>(std::log(99.0)), 0.0f}, 0);
    const auto b = bias_score(std::vector<float>{static_cast<float>(std::log(9.0)), 0.0f}, 1);
    const auto c = bias_score(std::vector<float>{5.0f, 0.0f, 0.0f}, 0);
    const double pc = std::exp(5.0) / (std::exp(5.0) + 2.0);
    const bool examples = a.correct && std::abs(a.score - 0.01) < 1e-7 && !b.correct && std::abs(b.score - 0.90) < 1e-7 &&
                          std::abs(c.score - (1.0 - pc)) < 1e-12 && std::abs(c.score - 0.01333) < 5e-5;
    return {worst <= 1e-12 && examples, "max |score - brute force| " + sci(worst) + " on 10^4 inputs; worked examples " +
                                            (examples ? "reproduced" : "MISMATCH") + " (0.01, 0.90, " + num(c.score, 5) + ")"};
  }

  Outcome partition_quality() {
    Pipeline p(desk_config(work_, 0, true));
    for (Stage s : {Stage::data, Stage::biased_train, Stage::partition}) p.run_stage(s);
    const json pj = json::parse(io::read_text(p.stage_dir(Stage::partition) / "partition.json"));
    const double f1 = pj["metrics"]["f1"].get<double>();
    return {f1 >= 0.85, "macro F1 " + num(f1) + " (P " + num(pj["metrics"]["precision"].get<double>()) + ", R " +
                            num(pj["metrics"]["recall"].get<double>()) + ", threshold " + num(pj["threshold"].get<double>()) + ", " +
                            std::to_string(pj["num_contrary"].get<int>()) + " contrary; limit 0.85)"};
  }

  Outcome cam_logit_identity() {
    Pipeline p(desk_config(work_, 0, true));
    for (Stage s : {Stage::data, Stage::biased_train}) p.run_stage(s);
    const Dataset d = load_manifest(p.stage_dir(Stage::data) / "dataset");
    const auto snap = load_classifier(p.stage_dir(Stage::biased_train) / "snapshot.ckpt");
    const auto final_model = load_classifier(p.stage_dir(Stage::biased_train) / "final.ckpt");
    const auto& pool = d.split(kUnbiasedSplit);
    std::mt19937_64 rng(4);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      const Classifier& clf = i % 2 ? final_model.model : snap.model;
      const auto& ex = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      const int c = std::uniform_int_distribution<int>(0, 9)(rng);
      const Tensor logits = predict_logits(clf, std::span<const Image>(&ex.image, 1));
      worst = std::max(worst, std::abs(cam_logit(compute_cam(clf, ex.image, c), clf.head().bias.value()[c]) - logits[c]));
    }
    return {worst <= 1e-5, "max |mean CAM + bias - logit| " + sci(worst) + " on 100 pairs (limit 1e-5)"};
  }

  Outcome sampling_fidelity() {
    Pipeline p(desk_config(work_, 0, true));
    for (Stage s : {Stage::data, Stage::biased_train}) p.run_stage(s);
    const Dataset d = load_manifest(p.stage_dir(Stage::data) / "dataset");
    const auto snap = load_classifier(p.stage_dir(Stage::biased_train) / "snapshot.ckpt");
    const auto& ex = d.split(kTrainSplit).front();
    const auto dist = to_sampling_distribution(compute_cam(snap.model, ex.image, ex.target), 10.0);
    const int stride = snap.model.feature_stride();
    std::mt19937_64 rng(5);
    std::string detail;
    bool pass = true;
    for (CropMode mode : {CropMode::bias_tailored, CropMode::uniform}) {
      std::vector<long> counts(dist.probabilities.size(), 0);
      for (const auto& s : sample_patch_boxes(28, 28, dist, stride, 7, 100000, mode, rng)) ++counts[s.cell_y * dist.width + s.cell_x];
      const auto expected = mode == CropMode::uniform ? uniform_distribution(dist.height, dist.width).probabilities : dist.probabilities;
      const double pv = chi_square_pvalue(counts, expected);
      pass = pass && pv > 0.01;
      detail += (detail.empty() ? "" : ", ") + to_string(mode) + " p=" + num(pv);
    }
    return {pass, detail + " with 10^5 centers each (limit p > 0.01)"};
  }

  Outcome oracle_delta() {
    const json& r = oracle_report(work_, 0);
    const double delta = r["delta_unbiased_accuracy"].get<double>();
    return {delta >= 0.20, "debiased " + num(unbiased(r, "debiased")) + " vs vanilla " + num(unbiased(r, "vanilla")) + ", delta " +
                               num(100 * delta, 2) + " pt (limit 20)"};
  }

  Outcome gan_delta() {
    std::vector<double> deltas, hues;
    std::string per_seed;
    for (int seed : {0, 1, 2}) {
      Pipeline p(desk_config(work_, seed, false));
      const json r = p.run_all();
      deltas.push_back(r["delta_unbiased_accuracy"].get<double>());
      hues.push_back(r["swap_probe"]["hue_transfer"].get<double>());
      per_seed += " seed " + std::to_string(seed) + ": " + num(100 * deltas.back(), 1) + " pt / " + num(100 * hues.back(), 0) + "%;";
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    const double md = median(deltas), mh = median(hues);
    return {md >= 0.10 && mh >= 0.60, "median delta " + num(100 * md, 2) + " pt (limit 10), median hue transfer " + num(100 * mh, 1) +
                                          "% (limit 60);" + per_seed};
  }

  Outcome ablation_order() {
    const json& full = oracle_report(work_, 0);
    Pipeline c1(ablated(desk_config(work_, 0, true), Ablation::c1));
    const json r = c1.run_all();
    const double a = unbiased(full, "debiased"), b = unbiased(r, "debiased");
    return {a > b, "full " + num(a) + " vs w/o c1 " + num(b) + " unbiased accuracy (oracle swap, seed 0)"};
  }

  Outcome determinism() {
    const json& first = oracle_report(work_, 0);
    const fs::path other = work_ / "replay";
    fs::remove_all(other);
    const json& second = oracle_report(other, 0);
    bool same = first == second;
    std::size_t checked = 0;
    std::string broken;
    std::vector<fs::path> manifests;
    for (const auto& e : fs::recursive_directory_iterator(work_))
      if (e.is_regular_file() && e.path().filename() == "manifest.ndjson" && e.path().string().find(".tmp") == std::string::npos)
        manifests.push_back(e.path().parent_path());
    const fs::path copy = fs::temp_directory_path() / ("biaswap_roundtrip_" + std::to_string(::getpid()));
    for (const fs::path& dir : manifests) {
      const Dataset d = load_manifest(dir);
      fs::remove_all(copy);
      write_manifest(d, copy);
      const bool ok = load_manifest(copy) == d && io::read_text(copy / "manifest.ndjson") == io::read_text(dir / "manifest.ndjson");
      if (!ok) broken += " " + dir.string();
      ++checked;
    }
    fs::remove_all(copy);
    return {same && broken.empty() && checked > 0, std::string("replayed report ") + (same ? "identical" : "DIFFERS") + "; " +
                                                       std::to_string(checked) + " manifests round-tripped" +
                                                       (broken.empty() ? "" : ", mismatches:" + broken)};
  }

 private:
  fs::path work_;
  std::map<std::string, json> oracle_cache_;

  const json& oracle_report(const fs::path& root, int seed) {
    const std::string key = root.string() + "#" + std::to_string(seed);
    auto it = oracle_cache_.find(key);
    if (it == oracle_cache_.end()) {
      Pipeline p(desk_config(root, seed, true));
      it = oracle_cache_.emplace(key, p.run_all()).first;
    }
    return it->second;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale acceptance criteria"};
  std::string work = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--work-dir", work, "run root for pipeline artifacts");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  Acceptance a{fs::absolute(work)};
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"GCE gradient identity", [&] { return a.gce_gradient_identity(); }},
      {"bias-score oracle equivalence", [&] { return a.bias_score_oracle(); }},
      {"partition quality (desk)", [&] { return a.partition_quality(); }},
      {"CAM/logit consistency", [&] { return a.cam_logit_identity(); }},
      {"sampling-distribution fidelity", [&] { return a.sampling_fidelity(); }},
      {"oracle-swap end-to-end delta", [&] { return a.oracle_delta(); }},
      {"GAN-swap end-to-end delta", [&] { return a.gan_delta(); }},
      {"ablation ordering (full > w/o c1)", [&] { return a.ablation_order(); }},
      {"determinism and manifest round-trip", [&] { return a.determinism(); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  std::vector<std::string> lines;
  bool all_pass = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all_pass = all_pass && o.pass;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << criteria[i].first << " - " << o.detail << " [" << num(secs, 1)
         << " s]";
    std::cout << line.str() << std::endl;
    lines.push_back(line.str());
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l.substr(0, l.find(" - ")) << "\n";
  return all_pass ? 0 : 1;
}
