#pragma once

// Biased dataset synthesis (Colored MNIST, Corrupted CIFAR10) and the
// on-disk dataset format: pixels.bin + manifest.ndjson + spec.json.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "biaswap/corruptions.hpp"
#include "biaswap/image.hpp"
#include "biaswap/serialize.hpp"

namespace biaswap {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Provenance {
  std::string content_id;
  std::string style_id;
  bool operator==(const Provenance&) const = default;
};

struct LabeledExample {
  std::string id;
  Image image;
  int target = 0;
  std::optional<bool> gt_bias_flag;  // true = bias-contrary
  std::optional<int> pseudo_bias_label;
  std::optional<int> bias_attribute;  // index into the spec's attribute list
  std::optional<Provenance> provenance;

  bool operator==(const LabeledExample&) const = default;
};

enum class DatasetKind { colored_mnist, corrupted_cifar10 };

inline std::string to_string(DatasetKind k) { return k == DatasetKind::colored_mnist ? "colored_mnist" : "corrupted_cifar10"; }
inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "colored_mnist") return DatasetKind::colored_mnist;
  if (s == "corrupted_cifar10") return DatasetKind::corrupted_cifar10;
  throw InvalidArgument("unknown dataset kind '" + s + "'");
}

struct SplitSizes {
  int train = 10000;
  int unbiased_test = 2000;
  int guiding_test = 1000;
  bool operator==(const SplitSizes&) const = default;
};

struct BiasedDatasetSpec {
  DatasetKind kind = DatasetKind::colored_mnist;
  double bias_ratio = 0.99;
  std::vector<std::string> attributes;  // palette colour names or corruption names, one per class
  int severity = corrupt::kDefaultSeverity;
  std::uint64_t seed = 0;
  SplitSizes sizes;
  int jitter = 0;  // max random translation (pixels) applied to source digits

  int num_classes() const { return static_cast<int>(attributes.size()); }
  bool operator==(const BiasedDatasetSpec&) const = default;
};

inline constexpr const char* kTrainSplit = "train";
inline constexpr const char* kUnbiasedSplit = "unbiased_test";
inline constexpr const char* kGuidingSplit = "guiding_test";

struct Dataset {
  BiasedDatasetSpec spec;
  std::map<std::string, std::vector<LabeledExample>> splits;
  json metadata = json::object();  // e.g. augmentation plan

  const std::vector<LabeledExample>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw InvalidArgument("dataset has no split '" + name + "'");
    return it->second;
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [_, v] : splits) n += v.size();
    return n;
  }
  bool operator==(const Dataset&) const = default;
};

// ---- palette ---------------------------------------------------------------

struct Rgb {
  float r, g, b;
};

// Ten well separated colours, each with a unit maximum channel.
inline const std::vector<std::pair<std::string, Rgb>>& palette_table() {
  static const std::vector<std::pair<std::string, Rgb>> t{
      {"red", {1.0f, 0.0f, 0.0f}},     {"green", {0.0f, 1.0f, 0.0f}},     {"blue", {0.0f, 0.0f, 1.0f}},
      {"yellow", {1.0f, 1.0f, 0.0f}},  {"magenta", {1.0f, 0.0f, 1.0f}},   {"cyan", {0.0f, 1.0f, 1.0f}},
      {"orange", {1.0f, 0.5f, 0.0f}},  {"violet", {0.5f, 0.0f, 1.0f}},    {"spring", {0.0f, 1.0f, 0.5f}},
      {"white", {1.0f, 1.0f, 1.0f}},
  };
  return t;
}

inline std::vector<std::string> default_palette() {
  std::vector<std::string> names;
  for (const auto& [n, _] : palette_table()) names.push_back(n);
  return names;
}

inline Rgb palette_rgb(const std::string& name) {
  for (const auto& [n, c] : palette_table())
    if (n == name) return c;
  throw InvalidArgument("unknown palette colour '" + name + "'");
}

// Colours a single-channel digit by per-channel scaling; background stays black.
inline Image recolor(const Image& gray, Rgb c) {
  if (gray.channels != 1) throw InvalidArgument("recolor expects a single-channel image");
  Image out(gray.height, gray.width, 3);
  for (int y = 0; y < gray.height; ++y)
    for (int x = 0; x < gray.width; ++x) {
      const float v = gray.at(y, x, 0);
      out.at(y, x, 0) = v * c.r;
      out.at(y, x, 1) = v * c.g;
      out.at(y, x, 2) = v * c.b;
    }
  return out;
}

// Recovers the grayscale digit from a palette-coloured image (max channel).
inline Image decolor(const Image& rgb) {
  Image out(rgb.height, rgb.width, 1);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      out.at(y, x, 0) = std::max({rgb.at(y, x, 0), rgb.at(y, x, 1), rgb.at(y, x, 2)});
  return out;
}

// Index of the palette colour nearest to the brightness-weighted mean chroma of
// the foreground (pixels whose max channel exceeds `threshold`). -1 if no foreground.
inline int dominant_palette_index(const Image& im, const std::vector<std::string>& palette, float threshold = 0.3f) {
  double acc[3] = {0, 0, 0}, wsum = 0;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const float m = std::max({im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2)});
      if (m < threshold) continue;
      for (int c = 0; c < 3; ++c) acc[c] += im.at(y, x, c);
      wsum += m;
    }
  if (wsum <= 0) return -1;
  int best = -1;
  double best_d = 1e30;
  for (std::size_t i = 0; i < palette.size(); ++i) {
    const Rgb p = palette_rgb(palette[i]);
    const double d = std::pow(acc[0] / wsum - p.r, 2) + std::pow(acc[1] / wsum - p.g, 2) + std::pow(acc[2] / wsum - p.b, 2);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// ---- sources ---------------------------------------------------------------

// Raw class-labelled images split into a training pool and a held-out pool.
struct SourceImages {
  std::vector<Image> train;
  std::vector<int> train_labels;
  std::vector<Image> test;
  std::vector<int> test_labels;
};

// Loads MNIST digits from CSV rows of 784 pixel values (0..255) plus a label.
// The last `holdout_per_class` digits of every class (file order) form the test pool.
inline SourceImages load_mnist_csv(const fs::path& path, int holdout_per_class, bool label_last = true) {
  const std::string text = io::read_maybe_gz(path);
  std::vector<Image> images;
  std::vector<int> labels;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<float> vals;
    vals.reserve(785);
    const char* p = line.c_str();
    while (*p) {
      char* end = nullptr;
      const float v = std::strtof(p, &end);
      if (end == p) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": non-numeric field");
      vals.push_back(v);
      p = end;
      while (*p == ',' || *p == ' ' || *p == '\r') ++p;
    }
    if (vals.size() != 785) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 785 fields");
    const int label = static_cast<int>(label_last ? vals.back() : vals.front());
    Image im(28, 28, 1);
    for (int i = 0; i < 784; ++i) im.pixels[i] = vals[label_last ? i : i + 1] / 255.0f;
    images.push_back(std::move(im));
    labels.push_back(label);
  }
  if (images.empty()) throw FormatError(path.string() + ": no digits");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<bool> is_test(images.size(), false);
  for (auto& [_, idx] : by_class)
    for (std::size_t k = idx.size() - std::min<std::size_t>(idx.size(), holdout_per_class); k < idx.size(); ++k) is_test[idx[k]] = true;
  SourceImages s;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto& imgs = is_test[i] ? s.test : s.train;
    auto& labs = is_test[i] ? s.test_labels : s.train_labels;
    imgs.push_back(std::move(images[i]));
    labs.push_back(labels[i]);
  }
  return s;
}

namespace detail {

inline std::uint32_t read_be32(const std::string& s, std::size_t off) {
  if (off + 4 > s.size()) throw FormatError("IDX file truncated");
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 3]));
}

}  // namespace detail

// Reads an IDX image/label file pair (optionally gzipped) as used by the MNIST distribution.
inline std::pair<std::vector<Image>, std::vector<int>> load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const std::string im = io::read_maybe_gz(images_path), lb = io::read_maybe_gz(labels_path);
  if (detail::read_be32(im, 0) != 0x803 || detail::read_be32(lb, 0) != 0x801) throw FormatError("bad IDX magic");
  const auto n = detail::read_be32(im, 4), h = detail::read_be32(im, 8), w = detail::read_be32(im, 12);
  if (detail::read_be32(lb, 4) != n) throw FormatError("IDX image/label count mismatch");
  if (im.size() < 16 + static_cast<std::size_t>(n) * h * w || lb.size() < 8 + n) throw FormatError("IDX file truncated");
  std::vector<Image> images;
  std::vector<int> labels;
  for (std::uint32_t i = 0; i < n; ++i) {
    Image g(static_cast<int>(h), static_cast<int>(w), 1);
    for (std::size_t k = 0; k < g.pixels.size(); ++k)
      g.pixels[k] = static_cast<unsigned char>(im[16 + static_cast<std::size_t>(i) * h * w + k]) / 255.0f;
    images.push_back(std::move(g));
    labels.push_back(static_cast<unsigned char>(lb[8 + i]));
  }
  return {std::move(images), std::move(labels)};
}

// Reads CIFAR-10 binary batches (1 label byte + 3072 CHW bytes per record).
inline std::pair<std::vector<Image>, std::vector<int>> load_cifar10_binary(const std::vector<fs::path>& batches) {
  std::vector<Image> images;
  std::vector<int> labels;
  for (const auto& p : batches) {
    const std::string s = io::read_text(p);
    if (s.size() % 3073) throw FormatError(p.string() + ": not a CIFAR-10 binary batch");
    for (std::size_t r = 0; r < s.size() / 3073; ++r) {
      const std::size_t base = r * 3073;
      labels.push_back(static_cast<unsigned char>(s[base]));
      Image im(32, 32, 3);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 32; ++x)
            im.at(y, x, c) = static_cast<unsigned char>(s[base + 1 + c * 1024 + y * 32 + x]) / 255.0f;
      images.push_back(std::move(im));
    }
  }
  return {std::move(images), std::move(labels)};
}

// ---- generation ------------------------------------------------------------

namespace detail {

inline Image shift(const Image& in, int dy, int dx) {
  if (dy == 0 && dx == 0) return in;
  Image out(in.height, in.width, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const int sy = y - dy, sx = x - dx;
      if (sy < 0 || sy >= in.height || sx < 0 || sx >= in.width) continue;
      for (int c = 0; c < in.channels; ++c) out.at(y, x, c) = in.at(sy, sx, c);
    }
  return out;
}

inline std::string pad_id(const std::string& prefix, std::size_t i) {
  std::string n = std::to_string(i);
  return prefix + "-" + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
}

// Draws source images of one class without replacement, reshuffling when the pool is exhausted.
class ClassPool {
 public:
  ClassPool(std::vector<std::size_t> idx, std::mt19937_64& rng) : idx_(std::move(idx)), rng_(&rng) {
    std::shuffle(idx_.begin(), idx_.end(), *rng_);
  }
  std::size_t next() {
    if (pos_ == idx_.size()) {
      std::shuffle(idx_.begin(), idx_.end(), *rng_);
      pos_ = 0;
    }
    return idx_[pos_++];
  }

 private:
  std::vector<std::size_t> idx_;
  std::mt19937_64* rng_;
  std::size_t pos_ = 0;
};

enum class AttributeMode { biased, uniform, guiding };

// Shared class<->attribute protocol. `render(source, attribute, example_seed)` produces the final image.
template <class Render>
std::vector<LabeledExample> make_split(const std::string& name, int total, AttributeMode mode, double ratio, int k,
                                       const std::vector<Image>& pool, const std::vector<int>& labels, int jitter,
                                       std::mt19937_64& rng, Render&& render) {
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw InvalidArgument("source label " + std::to_string(labels[i]) + " outside [0,K)");
    by_class[labels[i]].push_back(i);
  }
  for (int c = 0; c < k; ++c)
    if (by_class[c].empty()) throw InvalidArgument("source has no images of class " + std::to_string(c));
  std::vector<ClassPool> pools;
  for (int c = 0; c < k; ++c) pools.emplace_back(by_class[c], rng);

  struct Draft {
    int target;
    int attribute;
    bool contrary;
  };
  std::vector<Draft> drafts;
  for (int c = 0; c < k; ++c) {
    const int n_c = total / k + (c < total % k ? 1 : 0);
    if (mode == AttributeMode::biased) {
      const int n_contrary = static_cast<int>(std::llround((1.0 - ratio) * n_c));
      std::vector<bool> flags(n_c, false);
      std::fill_n(flags.begin(), n_contrary, true);
      std::shuffle(flags.begin(), flags.end(), rng);
      std::uniform_int_distribution<int> other(0, k - 2);
      for (bool f : flags) {
        int a = c;
        if (f) {
          a = other(rng);
          if (a >= c) ++a;
        }
        drafts.push_back({c, a, f});
      }
    } else if (mode == AttributeMode::uniform) {
      std::uniform_int_distribution<int> any(0, k - 1);
      for (int i = 0; i < n_c; ++i) {
        const int a = any(rng);
        drafts.push_back({c, a, a != c});
      }
    } else {
      for (int i = 0; i < n_c; ++i) drafts.push_back({c, c, false});
    }
  }
  std::shuffle(drafts.begin(), drafts.end(), rng);

  std::uniform_int_distribution<int> jit(-jitter, jitter);
  std::vector<LabeledExample> out;
  out.reserve(drafts.size());
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    const auto& d = drafts[i];
    const Image& src = pool[pools[d.target].next()];
    const int dy = jitter ? jit(rng) : 0, dx = jitter ? jit(rng) : 0;
    const std::uint64_t example_seed = rng();
    LabeledExample ex;
    ex.id = pad_id(name, i);
    ex.image = render(shift(src, dy, dx), d.attribute, example_seed);
    ex.target = d.target;
    ex.gt_bias_flag = d.contrary;
    ex.bias_attribute = d.attribute;
    out.push_back(std::move(ex));
  }
  return out;
}

inline void validate_spec(const BiasedDatasetSpec& spec, const SourceImages& src) {
  const int k = spec.num_classes();
  if (k < 2) throw InvalidArgument("need at least two bias attributes (one per class)");
  if (!(spec.bias_ratio > 0.0 && spec.bias_ratio <= 1.0))
    throw InvalidArgument("bias_ratio " + std::to_string(spec.bias_ratio) + " outside (0,1]");
  if (src.train.empty() || src.test.empty()) throw InvalidArgument("empty image source");
  int max_label = 0;
  for (int l : src.train_labels) max_label = std::max(max_label, l);
  if (max_label + 1 != k)
    throw InvalidArgument("attribute list has " + std::to_string(k) + " entries but the source has " + std::to_string(max_label + 1) + " classes");
  if (spec.sizes.train <= 0 || spec.sizes.unbiased_test <= 0 || spec.sizes.guiding_test <= 0)
    throw InvalidArgument("split sizes must be positive");
  if (spec.jitter < 0) throw InvalidArgument("jitter must be non-negative");
}

template <class Render>
Dataset generate_biased(const BiasedDatasetSpec& spec, const SourceImages& src, Render&& render) {
  validate_spec(spec, src);
  const int k = spec.num_classes();
  Dataset d;
  d.spec = spec;
  std::mt19937_64 rng(spec.seed);
  d.splits[kTrainSplit] = make_split(kTrainSplit, spec.sizes.train, AttributeMode::biased, spec.bias_ratio, k, src.train,
                                     src.train_labels, spec.jitter, rng, render);
  d.splits[kUnbiasedSplit] = make_split(kUnbiasedSplit, spec.sizes.unbiased_test, AttributeMode::uniform, spec.bias_ratio, k,
                                        src.test, src.test_labels, spec.jitter, rng, render);
  d.splits[kGuidingSplit] = make_split(kGuidingSplit, spec.sizes.guiding_test, AttributeMode::guiding, spec.bias_ratio, k,
                                       src.test, src.test_labels, spec.jitter, rng, render);
  return d;
}

}  // namespace detail

inline Dataset generate_colored_mnist(const BiasedDatasetSpec& spec, const SourceImages& mnist) {
  if (spec.kind != DatasetKind::colored_mnist) throw InvalidArgument("spec kind is not colored_mnist");
  std::vector<Rgb> colours;
  for (const auto& name : spec.attributes) colours.push_back(palette_rgb(name));
  for (const auto& im : mnist.train)
    if (im.channels != 1) throw InvalidArgument("MNIST source must be grayscale");
  return detail::generate_biased(spec, mnist, [&](const Image& g, int a, std::uint64_t) { return recolor(g, colours[a]); });
}

inline Dataset generate_corrupted_cifar10(const BiasedDatasetSpec& spec, const SourceImages& cifar) {
  if (spec.kind != DatasetKind::corrupted_cifar10) throw InvalidArgument("spec kind is not corrupted_cifar10");
  for (const auto& name : spec.attributes) corrupt::validate(name, spec.severity);
  return detail::generate_biased(spec, cifar, [&](const Image& im, int a, std::uint64_t seed) {
    return corrupt::apply(spec.attributes[a], im, spec.severity, seed);
  });
}

// ---- manifest I/O ----------------------------------------------------------

inline constexpr std::uint32_t kManifestVersion = 1;

inline json spec_to_json(const BiasedDatasetSpec& s) {
  return json{{"dataset_kind", to_string(s.kind)},
              {"bias_ratio", s.bias_ratio},
              {"attributes", s.attributes},
              {"severity", s.severity},
              {"seed", s.seed},
              {"jitter", s.jitter},
              {"split_sizes", {{"train", s.sizes.train}, {"unbiased_test", s.sizes.unbiased_test}, {"guiding_test", s.sizes.guiding_test}}}};
}

inline BiasedDatasetSpec spec_from_json(const json& j) {
  BiasedDatasetSpec s;
  s.kind = parse_dataset_kind(j.at("dataset_kind").get<std::string>());
  s.bias_ratio = j.at("bias_ratio").get<double>();
  s.attributes = j.at("attributes").get<std::vector<std::string>>();
  s.severity = j.at("severity").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.jitter = j.value("jitter", 0);
  const auto& z = j.at("split_sizes");
  s.sizes = {z.at("train").get<int>(), z.at("unbiased_test").get<int>(), z.at("guiding_test").get<int>()};
  return s;
}

inline std::string pixel_checksum(const Image& im) { return io::sha256_hex(std::span<const float>(im.pixels)); }

// Writes dataset into `dir` (created if needed), replacing previous contents.
inline void write_manifest(const Dataset& d, const fs::path& dir) {
  if (d.total() == 0) throw InvalidArgument("write_manifest: dataset is empty");
  fs::create_directories(dir);
  io::BinaryWriter blob(dir / "pixels.bin", "BSWT", kManifestVersion);
  std::ostringstream man;
  man << json{{"format", "biaswap-manifest"}, {"version", kManifestVersion}, {"count", d.total()}}.dump() << '\n';
  for (const auto& [split, examples] : d.splits)
    for (const auto& ex : examples) {
      json r{{"example_id", ex.id},
             {"split", split},
             {"target", ex.target},
             {"gt_bias_flag", ex.gt_bias_flag ? json(*ex.gt_bias_flag) : json(nullptr)},
             {"pseudo_bias_label", ex.pseudo_bias_label ? json(*ex.pseudo_bias_label) : json(nullptr)},
             {"bias_attribute", ex.bias_attribute ? json(*ex.bias_attribute) : json(nullptr)},
             {"shape", {ex.image.height, ex.image.width, ex.image.channels}},
             {"offset", blob.tell()},
             {"checksum", pixel_checksum(ex.image)}};
      if (ex.provenance) {
        r["content_id"] = ex.provenance->content_id;
        r["style_id"] = ex.provenance->style_id;
      }
      blob.floats(ex.image.pixels);
      man << r.dump() << '\n';
    }
  blob.close();
  io::write_text(dir / "manifest.ndjson", man.str());
  json spec = spec_to_json(d.spec);
  spec["format"] = "biaswap-dataset-spec";
  spec["version"] = kManifestVersion;
  spec["metadata"] = d.metadata;
  io::write_text(dir / "spec.json", spec.dump(2) + "\n");
}

inline Dataset load_manifest(const fs::path& dir) {
  Dataset d;
  json spec;
  try {
    spec = json::parse(io::read_text(dir / "spec.json"));
    if (spec.value("format", "") != "biaswap-dataset-spec" || spec.value("version", 0u) > kManifestVersion)
      throw FormatError(dir.string() + "/spec.json: unsupported spec format");
    d.spec = spec_from_json(spec);
    d.metadata = spec.value("metadata", json::object());
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + "/spec.json: " + e.what());
  }
  io::BinaryReader blob(dir / "pixels.bin", "BSWT", kManifestVersion);
  std::istringstream lines(io::read_text(dir / "manifest.ndjson"));
  std::string line;
  if (!std::getline(lines, line)) throw FormatError("manifest.ndjson is empty");
  std::size_t expected = 0;
  try {
    const json h = json::parse(line);
    if (h.value("format", "") != "biaswap-manifest" || h.value("version", 0u) > kManifestVersion)
      throw FormatError("manifest.ndjson: unsupported header");
    expected = h.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.ndjson header: ") + e.what());
  }
  std::size_t count = 0, lineno = 1;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string id = "<line " + std::to_string(lineno) + ">";
    try {
      const json r = json::parse(line);
      id = r.at("example_id").get<std::string>();
      LabeledExample ex;
      ex.id = id;
      ex.target = r.at("target").get<int>();
      if (!r.at("gt_bias_flag").is_null()) ex.gt_bias_flag = r["gt_bias_flag"].get<bool>();
      if (!r.at("pseudo_bias_label").is_null()) ex.pseudo_bias_label = r["pseudo_bias_label"].get<int>();
      if (r.contains("bias_attribute") && !r["bias_attribute"].is_null()) ex.bias_attribute = r["bias_attribute"].get<int>();
      if (r.contains("content_id")) ex.provenance = Provenance{r["content_id"].get<std::string>(), r.at("style_id").get<std::string>()};
      const auto shape = r.at("shape").get<std::vector<int>>();
      if (shape.size() != 3) throw FormatError("bad shape");
      ex.image = Image(shape[0], shape[1], shape[2]);
      blob.seek(r.at("offset").get<std::uint64_t>());
      blob.floats(ex.image.pixels);
      if (pixel_checksum(ex.image) != r.at("checksum").get<std::string>())
        throw FormatError("checksum mismatch for example " + id);
      d.splits[r.at("split").get<std::string>()].push_back(std::move(ex));
      ++count;
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      throw FormatError(msg.find(id) != std::string::npos ? msg : "corrupt record for example " + id + ": " + msg);
    } catch (const std::exception& e) {
      throw FormatError("corrupt record for example " + id + ": " + e.what());
    }
  }
  if (count != expected)
    throw FormatError("manifest lists " + std::to_string(count) + " records, header declares " + std::to_string(expected));
  return d;
}

}  // namespace biaswap
