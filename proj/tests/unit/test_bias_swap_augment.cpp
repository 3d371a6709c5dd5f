#include <gtest/gtest.h>

#include <map>

#include "biaswap/bias_swap_augment.hpp"

namespace biaswap {
namespace {

// Per-class counts of guiding and contrary examples; contrary ones carry the
// next class's colour.
struct Fixture {
  Dataset dataset;
  Partition partition;

  Fixture(const std::map<int, std::pair<int, int>>& counts) {
    dataset.spec.attributes = default_palette();
    auto& train = dataset.splits[kTrainSplit];
    std::size_t i = 0;
    for (const auto& [cls, gc] : counts)
      for (int k = 0; k < gc.first + gc.second; ++k) {
        const bool contrary = k >= gc.first;
        const int attr = contrary ? (cls + 1) % 10 : cls;
        Image gray(8, 8, 1);
        gray.at(2 + cls % 4, 3, 0) = gray.at(4, 2 + k % 4, 0) = 1.0f;
        LabeledExample ex;
        ex.id = detail::pad_id("train", i++);
        ex.image = recolor(gray, palette_rgb(default_palette()[attr]));
        ex.target = cls;
        ex.bias_attribute = attr;
        ex.gt_bias_flag = contrary;
        (contrary ? partition.contrary_ids : partition.guiding_ids).insert(ex.id);
        train.push_back(std::move(ex));
      }
  }
  const std::vector<LabeledExample>& train() const { return dataset.split(kTrainSplit); }
  const LabeledExample& by_id(const std::string& id) const {
    for (const auto& ex : train())
      if (ex.id == id) return ex;
    throw std::runtime_error("no id " + id);
  }
};

AugmentationPlan plan(double ratio = 1.0, PairingPolicy p = PairingPolicy::guiding_content_contrary_style) {
  AugmentationPlan a;
  a.augment_ratio = ratio;
  a.pairing = p;
  a.seed = 7;
  return a;
}

TEST(BuildPairs, GuidingContentWithSameClassContraryStyle) {
  const Fixture f({{0, {20, 2}}, {1, {30, 1}}});
  const auto pairs = build_pairs(f.partition, f.train(), plan());
  ASSERT_EQ(pairs.size(), 50u);
  std::map<std::string, int> uses;
  for (const auto& p : pairs) {
    EXPECT_TRUE(f.partition.guiding_ids.count(p.content_id));
    EXPECT_TRUE(f.partition.contrary_ids.count(p.style_id));
    EXPECT_EQ(f.by_id(p.content_id).target, f.by_id(p.style_id).target);
    ++uses[p.content_id];
  }
  EXPECT_EQ(uses.size(), 50u);
}

TEST(BuildPairs, SingleContraryExampleIsReusedAsStyle) {
  const Fixture f({{3, {12, 1}}});
  const auto pairs = build_pairs(f.partition, f.train(), plan());
  ASSERT_EQ(pairs.size(), 12u);
  for (const auto& p : pairs) EXPECT_EQ(p.style_id, pairs.front().style_id);
}

TEST(BuildPairs, FractionalRatioRoundsPerClass) {
  const Fixture f({{0, {10, 1}}, {1, {7, 1}}});
  EXPECT_EQ(build_pairs(f.partition, f.train(), plan(2.5)).size(), 25u + 18u);
  const auto half = build_pairs(f.partition, f.train(), plan(0.5));
  EXPECT_EQ(half.size(), 5u + 4u);
  std::set<std::string> contents;
  for (const auto& p : half) contents.insert(p.content_id);
  EXPECT_EQ(contents.size(), half.size());
}

TEST(BuildPairs, MissingContraryClassNamesTheClass) {
  const Fixture f({{0, {5, 1}}, {4, {5, 0}}});
  try {
    build_pairs(f.partition, f.train(), plan());
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("class(es) 4"), std::string::npos);
  }
  auto cross = plan();
  cross.class_matching = false;
  const auto pairs = build_pairs(f.partition, f.train(), cross);
  EXPECT_EQ(pairs.size(), 10u);
  for (const auto& p : pairs) EXPECT_TRUE(f.partition.contrary_ids.count(p.style_id));
}

TEST(BuildPairs, RandomPairsIgnoreThePartition) {
  const Fixture f({{0, {40, 2}}, {1, {40, 2}}});
  const auto pairs = build_pairs(f.partition, f.train(), plan(1.0, PairingPolicy::random_pairs));
  EXPECT_EQ(pairs.size(), 80u);
  int guiding_styles = 0;
  for (const auto& p : pairs) {
    EXPECT_EQ(f.by_id(p.content_id).target, f.by_id(p.style_id).target);
    guiding_styles += f.partition.guiding_ids.count(p.style_id) ? 1 : 0;
  }
  EXPECT_GT(guiding_styles, 60);
}

TEST(BuildPairs, DeterministicAndRejectsBadInput) {
  const Fixture f({{0, {9, 2}}, {1, {9, 2}}});
  EXPECT_EQ(build_pairs(f.partition, f.train(), plan()), build_pairs(f.partition, f.train(), plan()));
  EXPECT_THROW(build_pairs(f.partition, f.train(), plan(0.0)), InvalidArgument);
  Partition partial = f.partition;
  partial.guiding_ids.erase(partial.guiding_ids.begin());
  EXPECT_THROW(build_pairs(partial, f.train(), plan()), InvalidArgument);
}

TEST(PairSampler, FollowsPolicyAndAttachesStyleDistributions) {
  const Fixture f({{0, {6, 1}}, {1, {6, 2}}});
  auto dists = std::make_shared<std::vector<PatchDistribution>>();
  for (std::size_t i = 0; i < f.train().size(); ++i) dists->push_back(uniform_distribution(2, 2));
  const PairSampler sampler = make_pair_sampler(f.partition, f.train(), plan(), 32, dists);
  std::mt19937_64 rng(1);
  const auto batch = sampler(rng);
  ASSERT_EQ(batch.size(), 32u);
  for (const auto& p : batch) {
    EXPECT_EQ(p.content_target, p.style_target);
    const auto& style = *std::find_if(f.train().begin(), f.train().end(), [&](const auto& ex) { return &ex.image == p.style; });
    EXPECT_TRUE(f.partition.contrary_ids.count(style.id));
    const std::size_t idx = static_cast<std::size_t>(&style - f.train().data());
    EXPECT_EQ(p.style_distribution, &(*dists)[idx]);
  }
}

TEST(OracleRecolor, RendersContentDigitInStyleColour) {
  const Fixture f({{0, {5, 1}}, {1, {5, 1}}});
  const auto pairs = build_pairs(f.partition, f.train(), plan());
  const auto swapped = oracle_recolor_swap(pairs, f.dataset);
  ASSERT_EQ(swapped.size(), pairs.size());
  for (std::size_t i = 0; i < swapped.size(); ++i) {
    const auto& c = f.by_id(pairs[i].content_id);
    const auto& s = f.by_id(pairs[i].style_id);
    EXPECT_EQ(swapped[i].target, c.target);
    EXPECT_EQ(swapped[i].provenance->content_id, c.id);
    EXPECT_EQ(swapped[i].provenance->style_id, s.id);
    EXPECT_EQ(swapped[i].image, recolor(decolor(c.image), palette_rgb(default_palette()[*s.bias_attribute])));
    EXPECT_EQ(dominant_palette_index(swapped[i].image, default_palette()), *s.bias_attribute);
    EXPECT_FALSE(swapped[i].gt_bias_flag.has_value());
  }
  Dataset cifar = f.dataset;
  cifar.spec.kind = DatasetKind::corrupted_cifar10;
  EXPECT_THROW(oracle_recolor_swap(pairs, cifar), InvalidArgument);
  EXPECT_THROW(oracle_recolor_swap({{"nope", pairs[0].style_id}}, f.dataset), InvalidArgument);
}

TEST(UnionDataset, AppendsSwapsAndRejectsIdCollisions) {
  const Fixture f({{0, {4, 1}}});
  const auto swapped = oracle_recolor_swap(build_pairs(f.partition, f.train(), plan()), f.dataset);
  const auto all = union_dataset(f.train(), swapped);
  EXPECT_EQ(all.size(), f.train().size() + swapped.size());
  EXPECT_EQ(all.back().id, swapped.back().id);
  EXPECT_THROW(union_dataset(f.train(), {f.train().front()}), InvalidArgument);
}

TEST(GenerateBiasSwapped, UsesTheAutoencoderForEveryPair) {
  const Fixture f({{0, {3, 1}}});
  SwapAEConfig cfg;
  cfg.height = cfg.width = 8;
  cfg.patch_size = 4;
  cfg.cam_stride = 4;
  const SwapAEState state(cfg);
  const auto pairs = build_pairs(f.partition, f.train(), plan());
  const auto out = generate_bias_swapped(state, pairs, f.train());
  ASSERT_EQ(out.size(), pairs.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Image single = swap_generate(state, f.by_id(pairs[i].content_id).image, f.by_id(pairs[i].style_id).image);
    ASSERT_TRUE(single.same_shape(out[i].image));
    for (std::size_t j = 0; j < single.pixels.size(); ++j) EXPECT_NEAR(out[i].image.pixels[j], single.pixels[j], 1e-5);
  }
}

TEST(AugmentationPlan, JsonRoundTrip) {
  auto p = plan(1.5, PairingPolicy::random_pairs);
  p.class_matching = false;
  EXPECT_EQ(augmentation_plan_from_json(to_json(p)), p);
  EXPECT_EQ(to_json(p)["pairing_policy"], "random_pairs");
  EXPECT_THROW(parse_pairing_policy("both"), InvalidArgument);
}

}  // namespace
}  // namespace biaswap
