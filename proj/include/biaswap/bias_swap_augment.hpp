#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "biaswap/bias_partition.hpp"
#include "biaswap/swap_autoencoder.hpp"

namespace biaswap {

enum class PairingPolicy { guiding_content_contrary_style, random_pairs };

inline std::string to_string(PairingPolicy p) {
  return p == PairingPolicy::random_pairs ? "random_pairs" : "guiding_content_contrary_style";
}
inline PairingPolicy parse_pairing_policy(const std::string& s) {
  if (s == "guiding_content_contrary_style") return PairingPolicy::guiding_content_contrary_style;
  if (s == "random_pairs") return PairingPolicy::random_pairs;
  throw InvalidArgument("unknown pairing policy '" + s + "'");
}

struct AugmentationPlan {
  PairingPolicy pairing = PairingPolicy::guiding_content_contrary_style;
  double augment_ratio = 1.0;
  bool class_matching = true;
  std::uint64_t seed = 0;
  bool operator==(const AugmentationPlan&) const = default;

  void validate() const {
    if (!(augment_ratio > 0)) throw InvalidArgument("augment_ratio must be positive");
  }
};

inline json to_json(const AugmentationPlan& p) {
  return json{{"pairing_policy", to_string(p.pairing)}, {"augment_ratio", p.augment_ratio}, {"class_matching", p.class_matching}, {"seed", p.seed}};
}
inline AugmentationPlan augmentation_plan_from_json(const json& j) {
  AugmentationPlan p;
  p.pairing = parse_pairing_policy(j.at("pairing_policy").get<std::string>());
  p.augment_ratio = j.at("augment_ratio").get<double>();
  p.class_matching = j.at("class_matching").get<bool>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

struct SwapPair {
  std::string content_id;
  std::string style_id;
  bool operator==(const SwapPair&) const = default;
};

namespace augment_detail {

struct Pools {
  std::map<int, std::vector<std::size_t>> guiding, contrary, all;
  std::vector<std::size_t> guiding_flat, contrary_flat, all_flat;
};

inline Pools pools_of(const Partition& p, const std::vector<LabeledExample>& train) {
  Pools pools;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& ex = train[i];
    const bool c = p.contrary_ids.count(ex.id) > 0;
    if (!c && !p.guiding_ids.count(ex.id)) throw InvalidArgument("example '" + ex.id + "' is missing from the partition");
    (c ? pools.contrary : pools.guiding)[ex.target].push_back(i);
    (c ? pools.contrary_flat : pools.guiding_flat).push_back(i);
    pools.all[ex.target].push_back(i);
    pools.all_flat.push_back(i);
  }
  return pools;
}

inline const std::vector<std::size_t>& style_pool(const Pools& pools, const AugmentationPlan& plan, int target) {
  static const std::vector<std::size_t> empty;
  if (plan.pairing == PairingPolicy::random_pairs) {
    if (!plan.class_matching) return pools.all_flat;
    auto it = pools.all.find(target);
    return it == pools.all.end() ? empty : it->second;
  }
  if (!plan.class_matching) return pools.contrary_flat;
  auto it = pools.contrary.find(target);
  return it == pools.contrary.end() ? empty : it->second;
}

inline void check_styles_available(const Pools& pools, const AugmentationPlan& plan) {
  if (plan.pairing == PairingPolicy::random_pairs) return;
  if (!plan.class_matching) {
    if (pools.contrary_flat.empty()) throw InvalidArgument("partition has no bias-contrary examples to draw styles from");
    return;
  }
  std::string missing;
  for (const auto& [cls, idx] : pools.guiding)
    if (!idx.empty() && style_pool(pools, plan, cls).empty()) missing += (missing.empty() ? "" : ", ") + std::to_string(cls);
  if (!missing.empty())
    throw InvalidArgument("no bias-contrary examples for class(es) " + missing + "; set augment.class_matching=false to draw cross-class styles");
}

}  // namespace augment_detail

inline std::vector<SwapPair> build_pairs(const Partition& partition, const std::vector<LabeledExample>& train, const AugmentationPlan& plan) {
  plan.validate();
  const auto pools = augment_detail::pools_of(partition, train);
  augment_detail::check_styles_available(pools, plan);
  std::mt19937_64 rng(plan.seed);
  std::vector<SwapPair> pairs;
  const double base = std::floor(plan.augment_ratio);
  for (const auto& [cls, guiding] : pools.guiding) {
    const long total = std::llround(plan.augment_ratio * guiding.size());
    std::vector<int> reps(guiding.size(), static_cast<int>(base));
    std::vector<std::size_t> order(guiding.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (long extra = total - static_cast<long>(base) * static_cast<long>(guiding.size()), k = 0; k < extra; ++k) ++reps[order[k]];
    for (std::size_t g = 0; g < guiding.size(); ++g)
      for (int r = 0; r < reps[g]; ++r) {
        std::size_t content = guiding[g];
        if (plan.pairing == PairingPolicy::random_pairs)
          content = pools.all_flat[std::uniform_int_distribution<std::size_t>(0, pools.all_flat.size() - 1)(rng)];
        const auto& styles = augment_detail::style_pool(pools, plan, train[content].target);
        const std::size_t style = styles[std::uniform_int_distribution<std::size_t>(0, styles.size() - 1)(rng)];
        pairs.push_back({train[content].id, train[style].id});
      }
  }
  return pairs;
}

// Batch sampler for SwapAE training that follows the same pairing policy.
// Style CAM distributions are looked up by training index when provided.
inline PairSampler make_pair_sampler(const Partition& partition, const std::vector<LabeledExample>& train, const AugmentationPlan& plan,
                                     int batch_size, std::shared_ptr<const std::vector<PatchDistribution>> style_dists = nullptr) {
  auto pools = std::make_shared<augment_detail::Pools>(augment_detail::pools_of(partition, train));
  augment_detail::check_styles_available(*pools, plan);
  const auto& content_pool = plan.pairing == PairingPolicy::random_pairs ? pools->all_flat : pools->guiding_flat;
  if (content_pool.empty()) throw InvalidArgument("no content examples available for pairing");
  return [pools, &train, plan, batch_size, style_dists, &content_pool](std::mt19937_64& rng) {
    std::vector<TrainingPair> batch;
    for (int i = 0; i < batch_size; ++i) {
      const std::size_t c = content_pool[std::uniform_int_distribution<std::size_t>(0, content_pool.size() - 1)(rng)];
      const auto& styles = augment_detail::style_pool(*pools, plan, train[c].target);
      const std::size_t s = styles[std::uniform_int_distribution<std::size_t>(0, styles.size() - 1)(rng)];
      batch.push_back({&train[c].image, &train[s].image, train[c].target, train[s].target, style_dists ? &(*style_dists)[s] : nullptr});
    }
    return batch;
  };
}

namespace augment_detail {

inline std::unordered_map<std::string, const LabeledExample*> index_by_id(const std::vector<LabeledExample>& v) {
  std::unordered_map<std::string, const LabeledExample*> m;
  for (const auto& ex : v) m.emplace(ex.id, &ex);
  return m;
}

inline const LabeledExample& lookup(const std::unordered_map<std::string, const LabeledExample*>& m, const std::string& id) {
  auto it = m.find(id);
  if (it == m.end()) throw InvalidArgument("pair references unknown example '" + id + "'");
  return *it->second;
}

inline LabeledExample synthetic(std::size_t i, const LabeledExample& content, const LabeledExample& style, Image image) {
  LabeledExample ex;
  ex.id = detail::pad_id("swap", i);
  ex.image = std::move(image);
  ex.target = content.target;
  ex.provenance = Provenance{content.id, style.id};
  return ex;
}

}  // namespace augment_detail

inline std::vector<LabeledExample> generate_bias_swapped(const SwapAEState& state, const std::vector<SwapPair>& pairs,
                                                         const std::vector<LabeledExample>& train) {
  const auto idx = augment_detail::index_by_id(train);
  std::vector<const Image*> content, style;
  for (const auto& p : pairs) {
    content.push_back(&augment_detail::lookup(idx, p.content_id).image);
    style.push_back(&augment_detail::lookup(idx, p.style_id).image);
  }
  const auto images = pairs.empty() ? std::vector<Image>{} : swap_generate_batch(state, content, style);
  std::vector<LabeledExample> out;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool finite = std::all_of(images[i].pixels.begin(), images[i].pixels.end(), [](float v) { return std::isfinite(v); });
    if (!finite) {
      std::cerr << "skipping non-finite swap for pair (" << pairs[i].content_id << ", " << pairs[i].style_id << ")\n";
      ++skipped;
      continue;
    }
    out.push_back(augment_detail::synthetic(i, augment_detail::lookup(idx, pairs[i].content_id), augment_detail::lookup(idx, pairs[i].style_id),
                                            images[i]));
  }
  if (skipped * 100 > pairs.size())
    throw TrainingError(std::to_string(skipped) + " of " + std::to_string(pairs.size()) + " swapped images were non-finite");
  return out;
}

// Ground-truth recolouring: the content digit rendered in the style example's colour.
inline std::vector<LabeledExample> oracle_recolor_swap(const std::vector<SwapPair>& pairs, const Dataset& dataset) {
  if (dataset.spec.kind != DatasetKind::colored_mnist) throw InvalidArgument("oracle recolouring is only defined for colored_mnist");
  const auto& train = dataset.split(kTrainSplit);
  const auto idx = augment_detail::index_by_id(train);
  std::vector<LabeledExample> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& c = augment_detail::lookup(idx, pairs[i].content_id);
    const auto& s = augment_detail::lookup(idx, pairs[i].style_id);
    if (!s.bias_attribute) throw InvalidArgument("style example '" + s.id + "' has no bias attribute");
    const Rgb colour = palette_rgb(dataset.spec.attributes.at(*s.bias_attribute));
    out.push_back(augment_detail::synthetic(i, c, s, recolor(decolor(c.image), colour)));
  }
  return out;
}

inline std::vector<LabeledExample> union_dataset(const std::vector<LabeledExample>& x, const std::vector<LabeledExample>& swapped) {
  std::set<std::string> ids;
  for (const auto& ex : x) ids.insert(ex.id);
  std::vector<LabeledExample> out = x;
  for (const auto& ex : swapped) {
    if (!ids.insert(ex.id).second) throw InvalidArgument("id collision in augmented dataset: '" + ex.id + "'");
    out.push_back(ex);
  }
  return out;
}

// Rows of (content | style | swapped) for the first `limit` outputs.
inline void write_contact_sheet(const fs::path& path, const std::vector<LabeledExample>& swapped, const std::vector<LabeledExample>& train,
                                std::size_t limit = 16) {
  const auto idx = augment_detail::index_by_id(train);
  std::vector<Image> cells;
  for (std::size_t i = 0; i < std::min(limit, swapped.size()); ++i) {
    const auto& prov = swapped[i].provenance.value();
    cells.push_back(augment_detail::lookup(idx, prov.content_id).image);
    cells.push_back(augment_detail::lookup(idx, prov.style_id).image);
    cells.push_back(swapped[i].image);
  }
  if (!cells.empty()) write_ppm(path, tile_images(cells, 3));
}

}  // namespace biaswap
