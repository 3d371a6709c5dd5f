#include "test_support.hpp"

#include "biaswap/cam_sampler.hpp"

namespace biaswap {
namespace {

using testing::chi_square_pvalue;

Classifier briefly_trained_classifier() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> pos(2, 22);
  const auto pal = default_palette();
  std::vector<LabeledExample> data;
  for (int c = 0; c < 10; ++c)
    for (int i = 0; i < 6; ++i) {
      Image g(28, 28, 1);
      const int y0 = pos(rng), x0 = pos(rng);
      for (int y = y0; y < y0 + 4; ++y)
        for (int x = x0; x < x0 + 4; ++x) g.at(y, x, 0) = 1.0f;
      data.push_back({"e" + std::to_string(data.size()), recolor(g, palette_rgb(pal[c])), c, {}, {}, {}, {}});
    }
  TrainConfig t;
  t.loss = LossKind::gce;
  t.epochs = 3;
  t.batch_size = 20;
  t.snapshot_epochs = {};
  return std::move(train_classifier(data, ClassifierSpec{}, t).model);
}

Image random_image(std::mt19937_64& rng) {
  Image im(28, 28, 3);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : im.pixels) v = u(rng);
  return im;
}

TEST(Cam, MeanOfImportanceMapPlusBiasReproducesLogit) {
  const Classifier clf = briefly_trained_classifier();
  std::mt19937_64 rng(8);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const Image im = random_image(rng);
    const Tensor logits = predict_logits(clf, std::span<const Image>(&im, 1));
    const int c = i % 10;
    const ImportanceMap m = compute_cam(clf, im, c);
    worst = std::max(worst, std::abs(cam_logit(m, clf.head().bias.value()[c]) - logits[c]));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Cam, BatchedMatchesSingleImageMaps) {
  const Classifier clf = briefly_trained_classifier();
  std::mt19937_64 rng(9);
  std::vector<Image> ims;
  for (int i = 0; i < 5; ++i) ims.push_back(random_image(rng));
  std::vector<const Image*> ptrs;
  for (const auto& im : ims) ptrs.push_back(&im);
  const auto maps = compute_cams(clf, ptrs, {0, 1, 2, 3, 4}, 2);
  for (int i = 0; i < 5; ++i) {
    const auto single = compute_cam(clf, ims[i], i);
    ASSERT_EQ(maps[i].values.size(), 49u);
    for (std::size_t j = 0; j < 49; ++j) EXPECT_NEAR(maps[i].values[j], single.values[j], 1e-6);
  }
  EXPECT_THROW(compute_cams(clf, ptrs, {0, 1}), InvalidArgument);
  EXPECT_THROW(compute_cam(clf, ims[0], 10), InvalidArgument);
}

TEST(Cam, RequiresConvGap) {
  ClassifierSpec spec;
  spec.arch = Arch::mlp3;
  EXPECT_THROW(compute_cam(Classifier(spec, 1), Image(28, 28, 3), 0), Unsupported);
}

TEST(SamplingDistribution, TemperatureSoftmaxByHand) {
  ImportanceMap m{1, 3, 0, "", {0.0, 10.0, 20.0}};
  const auto d = to_sampling_distribution(m, 10.0);
  const double z = 1 + std::exp(1.0) + std::exp(2.0);
  EXPECT_NEAR(d.probabilities[0], 1 / z, 1e-15);
  EXPECT_NEAR(d.probabilities[1], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(d.probabilities[2], std::exp(2.0) / z, 1e-15);
  const auto flat = to_sampling_distribution(m, 1e9);
  for (double p : flat.probabilities) EXPECT_NEAR(p, 1.0 / 3, 1e-6);
  const auto sharp = to_sampling_distribution(ImportanceMap{1, 2, 0, "", {0.0, 5000.0}}, 1.0);
  EXPECT_EQ(sharp.probabilities[1], 1.0);
  EXPECT_THROW(to_sampling_distribution(m, 0.0), InvalidArgument);
  EXPECT_THROW(to_sampling_distribution(m, -1.0), InvalidArgument);
  EXPECT_THROW(to_sampling_distribution(ImportanceMap{1, 1, 0, "", {NAN}}, 1.0), InvalidArgument);
}

std::vector<long> cell_histogram(const std::vector<PatchSample>& s, int stride, int gw, int cells) {
  std::vector<long> h(cells, 0);
  for (const auto& p : s) ++h[(p.center_y / stride) * gw + p.center_x / stride];
  return h;
}

TEST(PatchSampling, BiasTailoredCentersFollowTheDistribution) {
  std::mt19937_64 rng(42);
  ImportanceMap m{7, 7, 0, "", std::vector<double>(49)};
  std::normal_distribution<double> z(0, 15);
  for (auto& v : m.values) v = z(rng);
  const auto d = to_sampling_distribution(m, 10.0);
  const auto s = sample_patch_boxes(28, 28, d, 4, 7, 100000, CropMode::bias_tailored, rng);
  EXPECT_GT(chi_square_pvalue(cell_histogram(s, 4, 7, 49), d.probabilities), 0.01);
}

TEST(PatchSampling, UniformModeIgnoresTheDistribution) {
  std::mt19937_64 rng(43);
  ImportanceMap m{7, 7, 0, "", std::vector<double>(49, 0.0)};
  m.values[3] = 100;
  const auto d = to_sampling_distribution(m, 1.0);
  const auto s = sample_patch_boxes(28, 28, d, 4, 7, 100000, CropMode::uniform, rng);
  EXPECT_GT(chi_square_pvalue(cell_histogram(s, 4, 7, 49), std::vector<double>(49, 1.0 / 49)), 0.01);
  // Pixel-level centers are uniform over the whole image too.
  std::vector<long> px(28 * 28, 0);
  for (const auto& p : s) ++px[p.center_y * 28 + p.center_x];
  EXPECT_GT(chi_square_pvalue(px, std::vector<double>(28 * 28, 1.0 / (28 * 28))), 0.01);
}

TEST(PatchSampling, ChiSquareDetectsAWrongDistribution) {
  std::mt19937_64 rng(44);
  ImportanceMap m{7, 7, 0, "", std::vector<double>(49, 0.0)};
  m.values[10] = 30;
  const auto d = to_sampling_distribution(m, 10.0);
  const auto s = sample_patch_boxes(28, 28, d, 4, 7, 100000, CropMode::bias_tailored, rng);
  EXPECT_LT(chi_square_pvalue(cell_histogram(s, 4, 7, 49), std::vector<double>(49, 1.0 / 49)), 1e-6);
}

TEST(PatchSampling, CentersStayInTheirCellAndCropsInTheImage) {
  std::mt19937_64 rng(45);
  const auto d = uniform_distribution(7, 7);
  for (const auto& p : sample_patch_boxes(28, 28, d, 4, 7, 5000, CropMode::uniform, rng)) {
    EXPECT_EQ(p.center_y / 4, p.cell_y);
    EXPECT_EQ(p.center_x / 4, p.cell_x);
    EXPECT_GE(p.top, 0);
    EXPECT_LE(p.top + 7, 28);
    EXPECT_GE(p.left, 0);
    EXPECT_LE(p.left + 7, 28);
    EXPECT_LE(std::abs(p.top + 3 - p.center_y), 3 + 3);
  }
  EXPECT_THROW(sample_patch_boxes(28, 28, d, 4, 29, 1, CropMode::uniform, rng), InvalidArgument);
  EXPECT_THROW(sample_patch_boxes(28, 28, uniform_distribution(3, 3), 4, 7, 1, CropMode::uniform, rng), InvalidArgument);
}

TEST(PatchSampling, PatchesCopyTheImageRegion) {
  std::mt19937_64 rng(46);
  const Image im = random_image(rng);
  for (const auto& p : sample_patches(im, uniform_distribution(7, 7), 4, 5, 20, CropMode::uniform, rng))
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x)
        for (int c = 0; c < 3; ++c) ASSERT_EQ(p.crop.at(y, x, c), im.at(p.where.top + y, p.where.left + x, c));
}

TEST(CamDump, WritesNpyWithShapeHeader) {
  const fs::path dir = fs::temp_directory_path() / ("biaswap_cam_" + std::to_string(::getpid()));
  ImportanceMap m{2, 3, 1, "img-7", {0, 1, 2, 3, 4, 5.5}};
  dump_cam(dir, m, Image(8, 12, 3));
  const std::string bytes = io::read_text(dir / "img-7.npy");
  ASSERT_EQ(bytes.substr(0, 6), "\x93NUMPY");
  const std::size_t hlen = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
  EXPECT_EQ((10 + hlen) % 64, 0u);
  EXPECT_NE(bytes.find("'shape': (2, 3)"), std::string::npos);
  ASSERT_EQ(bytes.size(), 10 + hlen + 6 * 4);
  float last = 0;
  std::memcpy(&last, bytes.data() + 10 + hlen + 5 * 4, 4);
  EXPECT_EQ(last, 5.5f);
  EXPECT_TRUE(fs::exists(dir / "img-7.ppm"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace biaswap
