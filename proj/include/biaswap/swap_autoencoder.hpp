#pragma once

// Swapping autoencoder at desk scale.
//
// E maps an image to a spatial content code z_c (stride 4) and a pooled style
// vector z_s. G decodes (z_c, z_s) with style-modulated convolutions. D scores
// whole images, D_patch scores a crop given a pooled set of reference crops
// from the style image. All networks consume images in [0,1] and rescale to
// [-1,1] internally. G has a linear RGB head mapped back to [0,1] space
// without squashing; outputs are clamped only when they become images.

#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "biaswap/cam_sampler.hpp"
#include "biaswap/classifiers.hpp"
#include "biaswap/nn.hpp"

namespace biaswap {

struct SwapAEConfig {
  int height = 28;
  int width = 28;
  int channels = 3;
  std::vector<int> encoder_channels{16, 32, 32};
  int content_channels = 4;
  int style_dim = 16;
  std::vector<int> decoder_channels{32, 32, 16, 16};
  std::vector<int> disc_channels{16, 32, 32};
  std::vector<int> patch_channels{16, 32};
  int patch_hidden = 64;

  int steps = 5000;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double lambda_recon = 1;
  double lambda_gan_recon = 1;
  double lambda_gan_swap = 1;
  double lambda_cooccur = 1;
  double r1_gamma = 0;  // gradient penalty weight; only 0 is supported

  int patch_size = 7;
  int n_ref = 4;
  double tau = 10;
  int cam_stride = 4;
  CropMode crop_mode = CropMode::bias_tailored;
  std::uint64_t seed = 0;
  bool operator==(const SwapAEConfig&) const = default;

  bool gan_enabled() const { return lambda_gan_recon != 0 || lambda_gan_swap != 0 || lambda_cooccur != 0; }

  void validate() const {
    if (height % 4 || width % 4) throw InvalidArgument("SwapAE resolution must be divisible by 4");
    if (encoder_channels.size() != 3 || decoder_channels.size() != 4 || disc_channels.size() != 3 || patch_channels.size() != 2)
      throw InvalidArgument("SwapAE channel lists have the wrong length");
    if (steps < 0 || batch_size <= 0 || learning_rate <= 0) throw InvalidArgument("SwapAE steps/batch/lr out of range");
    if (patch_size <= 0 || patch_size > std::min(height, width)) throw InvalidArgument("patch_size does not fit the image");
    if (n_ref <= 0) throw InvalidArgument("n_ref must be positive");
    if (!(tau > 0)) throw InvalidArgument("tau must be positive");
    if (r1_gamma != 0) throw Unsupported("R1 gradient penalty requires double backpropagation, which this library does not provide");
    for (double l : {lambda_recon, lambda_gan_recon, lambda_gan_swap, lambda_cooccur})
      if (l < 0) throw InvalidArgument("loss weights must be non-negative");
  }
};

inline json to_json(const SwapAEConfig& c) {
  return json{{"input_shape", {c.height, c.width, c.channels}},
              {"encoder_channels", c.encoder_channels},
              {"content_channels", c.content_channels},
              {"style_dim", c.style_dim},
              {"decoder_channels", c.decoder_channels},
              {"disc_channels", c.disc_channels},
              {"patch_channels", c.patch_channels},
              {"patch_hidden", c.patch_hidden},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"betas", {c.beta1, c.beta2}},
              {"lambda", {{"recon", c.lambda_recon}, {"gan_recon", c.lambda_gan_recon}, {"gan_swap", c.lambda_gan_swap}, {"cooccur", c.lambda_cooccur}}},
              {"r1_gamma", c.r1_gamma},
              {"patch_size", c.patch_size},
              {"n_ref", c.n_ref},
              {"tau", c.tau},
              {"cam_stride", c.cam_stride},
              {"crop_mode", to_string(c.crop_mode)},
              {"seed", c.seed}};
}

inline SwapAEConfig swapae_config_from_json(const json& j) {
  SwapAEConfig c;
  const auto shape = j.at("input_shape").get<std::vector<int>>();
  c.height = shape.at(0);
  c.width = shape.at(1);
  c.channels = shape.at(2);
  c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  c.content_channels = j.at("content_channels").get<int>();
  c.style_dim = j.at("style_dim").get<int>();
  c.decoder_channels = j.at("decoder_channels").get<std::vector<int>>();
  c.disc_channels = j.at("disc_channels").get<std::vector<int>>();
  c.patch_channels = j.at("patch_channels").get<std::vector<int>>();
  c.patch_hidden = j.at("patch_hidden").get<int>();
  c.steps = j.at("steps").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("betas").at(0).get<double>();
  c.beta2 = j.at("betas").at(1).get<double>();
  const auto& l = j.at("lambda");
  c.lambda_recon = l.at("recon").get<double>();
  c.lambda_gan_recon = l.at("gan_recon").get<double>();
  c.lambda_gan_swap = l.at("gan_swap").get<double>();
  c.lambda_cooccur = l.at("cooccur").get<double>();
  c.r1_gamma = j.at("r1_gamma").get<double>();
  c.patch_size = j.at("patch_size").get<int>();
  c.n_ref = j.at("n_ref").get<int>();
  c.tau = j.at("tau").get<double>();
  c.cam_stride = j.at("cam_stride").get<int>();
  c.crop_mode = parse_crop_mode(j.at("crop_mode").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

namespace swapae {

using ag::Var;

inline Var to_signed(const Var& x) { return ag::add_scalar(ag::scale(x, 2.0f), -1.0f); }
inline Var lrelu(const Var& x) { return ag::leaky_relu(x, 0.2f); }
inline int conv_out(int n, int stride) { return (n + 2 - 3) / stride + 1; }

inline Image to_image(const Tensor& t, int n) {
  Image im = from_batch(t, n);
  for (auto& v : im.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return im;
}

struct Encoder {
  nn::Conv2d c0, c1, c2, to_content, style_conv;
  nn::Linear style_fc;

  Encoder() = default;
  Encoder(const SwapAEConfig& c, std::mt19937_64& rng)
      : c0(c.channels, c.encoder_channels[0], 3, 1, 1, rng),
        c1(c.encoder_channels[0], c.encoder_channels[1], 3, 2, 1, rng),
        c2(c.encoder_channels[1], c.encoder_channels[2], 3, 2, 1, rng),
        to_content(c.encoder_channels[2], c.content_channels, 1, 1, 0, rng, 1.0f),
        style_conv(c.encoder_channels[2], c.encoder_channels[2], 3, 1, 1, rng),
        style_fc(c.encoder_channels[2], c.style_dim, rng) {}

  std::pair<Var, Var> operator()(const Var& x) const {
    const Var h = lrelu(c2(lrelu(c1(lrelu(c0(to_signed(x)))))));
    return {to_content(h), style_fc(ag::global_avg_pool(lrelu(style_conv(h))))};
  }
  void collect(nn::ParamList& out, const std::string& p) const {
    c0.collect(out, p + ".conv0");
    c1.collect(out, p + ".conv1");
    c2.collect(out, p + ".conv2");
    to_content.collect(out, p + ".content");
    style_conv.collect(out, p + ".style_conv");
    style_fc.collect(out, p + ".style_fc");
  }
};

struct Generator {
  nn::ModulatedConv2d m0, m1, m2, m3, rgb;

  Generator() = default;
  Generator(const SwapAEConfig& c, std::mt19937_64& rng)
      : m0(c.content_channels, c.decoder_channels[0], 3, c.style_dim, rng),
        m1(c.decoder_channels[0], c.decoder_channels[1], 3, c.style_dim, rng),
        m2(c.decoder_channels[1], c.decoder_channels[2], 3, c.style_dim, rng),
        m3(c.decoder_channels[2], c.decoder_channels[3], 3, c.style_dim, rng),
        rgb(c.decoder_channels[3], c.channels, 1, c.style_dim, rng, false) {}

  Var operator()(const Var& zc, const Var& zs) const {
    Var h = lrelu(m1(lrelu(m0(zc, zs)), zs));
    h = lrelu(m2(ag::upsample2x(h), zs));
    h = lrelu(m3(ag::upsample2x(h), zs));
    return ag::add_scalar(ag::scale(rgb(h, zs), 0.5f), 0.5f);
  }
  void collect(nn::ParamList& out, const std::string& p) const {
    m0.collect(out, p + ".mod0");
    m1.collect(out, p + ".mod1");
    m2.collect(out, p + ".mod2");
    m3.collect(out, p + ".mod3");
    rgb.collect(out, p + ".to_rgb");
  }
};

struct Discriminator {
  nn::Conv2d c0, c1, c2;
  nn::Linear fc;

  Discriminator() = default;
  Discriminator(const SwapAEConfig& c, std::mt19937_64& rng)
      : c0(c.channels, c.disc_channels[0], 3, 2, 1, rng),
        c1(c.disc_channels[0], c.disc_channels[1], 3, 2, 1, rng),
        c2(c.disc_channels[1], c.disc_channels[2], 3, 2, 1, rng),
        fc(c.disc_channels[2] * conv_out(conv_out(conv_out(c.height, 2), 2), 2) * conv_out(conv_out(conv_out(c.width, 2), 2), 2), 1, rng) {}

  Var operator()(const Var& x) const { return fc(ag::flatten(lrelu(c2(lrelu(c1(lrelu(c0(to_signed(x))))))))); }
  void collect(nn::ParamList& out, const std::string& p) const {
    c0.collect(out, p + ".conv0");
    c1.collect(out, p + ".conv1");
    c2.collect(out, p + ".conv2");
    fc.collect(out, p + ".fc");
  }
};

// Encodes a crop and n reference crops; the references are averaged before
// the joint head.
struct PatchDiscriminator {
  nn::Conv2d c0, c1;
  nn::Linear enc, joint, out;
  int n_ref = 1;

  PatchDiscriminator() = default;
  PatchDiscriminator(const SwapAEConfig& c, std::mt19937_64& rng)
      : c0(c.channels, c.patch_channels[0], 3, 1, 1, rng),
        c1(c.patch_channels[0], c.patch_channels[1], 3, 2, 1, rng),
        enc(c.patch_channels[1] * conv_out(c.patch_size, 2) * conv_out(c.patch_size, 2), c.patch_hidden, rng, std::sqrt(2.0f)),
        joint(2 * c.patch_hidden, c.patch_hidden, rng, std::sqrt(2.0f)),
        out(c.patch_hidden, 1, rng),
        n_ref(c.n_ref) {}

  Var features(const Var& crops) const { return lrelu(enc(ag::flatten(lrelu(c1(lrelu(c0(to_signed(crops)))))))); }
  // crop [B,C,p,p], refs [B*n_ref,C,p,p] -> logits [B,1]
  Var operator()(const Var& crop, const Var& refs) const {
    return out(lrelu(joint(ag::concat_features(features(crop), ag::group_mean(features(refs), n_ref)))));
  }
  void collect(nn::ParamList& o, const std::string& p) const {
    c0.collect(o, p + ".conv0");
    c1.collect(o, p + ".conv1");
    enc.collect(o, p + ".enc");
    joint.collect(o, p + ".joint");
    out.collect(o, p + ".out");
  }
};

}  // namespace swapae

class SwapAEState {
 public:
  explicit SwapAEState(SwapAEConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 init(cfg_.seed);
    E = swapae::Encoder(cfg_, init);
    G = swapae::Generator(cfg_, init);
    D = swapae::Discriminator(cfg_, init);
    Dp = swapae::PatchDiscriminator(cfg_, init);
    rng.seed(cfg_.seed ^ 0x5bd1e995ULL);
    opt_g = nn::Adam(generator_params(), {cfg_.learning_rate, cfg_.beta1, cfg_.beta2, 1e-8});
    opt_d = nn::Adam(discriminator_params(), {cfg_.learning_rate, cfg_.beta1, cfg_.beta2, 1e-8});
  }
  SwapAEState(const SwapAEState&) = delete;
  SwapAEState& operator=(const SwapAEState&) = delete;
  SwapAEState(SwapAEState&&) = default;
  SwapAEState& operator=(SwapAEState&&) = default;

  const SwapAEConfig& config() const { return cfg_; }

  nn::ParamList generator_params() const {
    nn::ParamList p;
    E.collect(p, "E");
    G.collect(p, "G");
    return p;
  }
  nn::ParamList discriminator_params() const {
    nn::ParamList p;
    D.collect(p, "D");
    Dp.collect(p, "D_patch");
    return p;
  }
  nn::ParamList all_params() const {
    auto p = generator_params();
    auto d = discriminator_params();
    p.insert(p.end(), d.begin(), d.end());
    return p;
  }

  swapae::Encoder E;
  swapae::Generator G;
  swapae::Discriminator D;
  swapae::PatchDiscriminator Dp;
  nn::Adam opt_g, opt_d;
  long step = 0;
  std::mt19937_64 rng;

 private:
  SwapAEConfig cfg_;
};

struct LatentPair {
  Tensor z_c;  // [C_c, h, w]
  Tensor z_s;  // [C_s]
};

namespace swapae {

inline void check_image(const SwapAEConfig& c, const Image& im) {
  if (im.height != c.height || im.width != c.width || im.channels != c.channels)
    throw InvalidArgument("image " + std::to_string(im.height) + "x" + std::to_string(im.width) + "x" + std::to_string(im.channels) +
                          " does not match the SwapAE resolution " + std::to_string(c.height) + "x" + std::to_string(c.width) + "x" +
                          std::to_string(c.channels));
}

inline Tensor batch_of(const SwapAEConfig& c, const std::vector<const Image*>& ims) {
  for (const auto* im : ims) check_image(c, *im);
  return to_batch(std::span<const Image* const>(ims), false);
}

}  // namespace swapae

inline LatentPair encode(const SwapAEState& s, const Image& image) {
  auto [zc, zs] = s.E(ag::Var(swapae::batch_of(s.config(), {&image})));
  const auto& c = zc.value();
  return {c.reshaped({c.dim(1), c.dim(2), c.dim(3)}), zs.value().reshaped({zs.dim(1)})};
}

inline Image decode(const SwapAEState& s, const LatentPair& z) {
  const auto& c = z.z_c;
  if (c.rank() != 3 || c.dim(0) != s.config().content_channels || z.z_s.numel() != static_cast<std::size_t>(s.config().style_dim))
    throw InvalidArgument("latent shapes do not match the SwapAE configuration");
  const ag::Var out = s.G(ag::Var(c.reshaped({1, c.dim(0), c.dim(1), c.dim(2)})), ag::Var(z.z_s.reshaped({1, s.config().style_dim})));
  return swapae::to_image(out.value(), 0);
}

inline double reconstruction_loss(const Image& x, const Image& x_hat) {
  if (!x.same_shape(x_hat)) throw InvalidArgument("reconstruction_loss: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < x.pixels.size(); ++i) {
    const double d = static_cast<double>(x.pixels[i]) - x_hat.pixels[i];
    s += d * d;
  }
  return s;
}

struct GanLosses {
  double generator = 0;
  double discriminator = 0;
};

// Non-saturating losses on discriminator probabilities, clamped to [eps, 1-eps].
inline GanLosses gan_losses(std::span<const double> d_real, std::span<const double> d_fake, double eps = 1e-12) {
  auto clamp = [eps](double p) { return std::clamp(p, eps, 1.0 - eps); };
  GanLosses l;
  for (double p : d_fake) {
    l.generator -= std::log(clamp(p));
    l.discriminator -= std::log(1.0 - clamp(p)) / static_cast<double>(d_fake.size());
  }
  if (!d_fake.empty()) l.generator /= static_cast<double>(d_fake.size());
  for (double p : d_real) l.discriminator -= std::log(clamp(p)) / static_cast<double>(d_real.size());
  return l;
}

// One training pair. The style distribution is only consulted in
// bias_tailored mode; when null it is computed from the CAM classifier.
struct TrainingPair {
  const Image* content = nullptr;
  const Image* style = nullptr;
  int content_target = 0;
  int style_target = 0;
  const PatchDistribution* style_distribution = nullptr;
};

struct SwapLosses {
  long step = 0;
  double recon = 0;
  double gan_recon = 0;
  double gan_swap = 0;
  double cooccur = 0;
  double d_image = 0;
  double d_patch = 0;
};

namespace swapae {

inline std::vector<PatchDistribution> distributions_for(const SwapAEConfig& c, const Classifier* clf, const std::vector<const Image*>& ims,
                                                        const std::vector<int>& classes) {
  const int gh = c.height / c.cam_stride, gw = c.width / c.cam_stride;
  if (c.crop_mode == CropMode::uniform) return std::vector<PatchDistribution>(ims.size(), uniform_distribution(gh, gw));
  if (!clf) throw InvalidArgument("bias_tailored crop mode needs CAM distributions (no classifier supplied)");
  std::vector<PatchDistribution> out;
  for (const auto& m : compute_cams(*clf, ims, classes)) out.push_back(to_sampling_distribution(m, c.tau));
  return out;
}

inline std::vector<ag::CropBox> boxes_for(const SwapAEConfig& c, const std::vector<PatchDistribution>& dists, int per_image,
                                          std::mt19937_64& rng) {
  std::vector<ag::CropBox> boxes;
  for (std::size_t i = 0; i < dists.size(); ++i)
    for (const auto& s : sample_patch_boxes(c.height, c.width, dists[i], c.cam_stride, c.patch_size, per_image, c.crop_mode, rng))
      boxes.push_back({static_cast<int>(i), s.top, s.left});
  return boxes;
}

inline void check_finite(double v, const char* component, long step) {
  if (!std::isfinite(v)) throw TrainingError(std::string("non-finite ") + component + " loss at step " + std::to_string(step));
}

}  // namespace swapae

// Generator-side co-occurrence loss -log D_patch(crop(generated), crops(style))
// for a single pair, averaged over `trials` independent crop draws.
inline double cooccurrence_loss(SwapAEState& s, const Image& generated, const Image& style, CropMode mode,
                                const PatchDistribution* generated_dist, const PatchDistribution* style_dist, int trials = 1) {
  const auto& c = s.config();
  if (mode == CropMode::bias_tailored && (!generated_dist || !style_dist))
    throw InvalidArgument("bias_tailored co-occurrence loss needs CAM distributions for both images");
  SwapAEConfig local = c;
  local.crop_mode = mode;
  const int gh = c.height / c.cam_stride, gw = c.width / c.cam_stride;
  const PatchDistribution u = uniform_distribution(gh, gw);
  const std::vector<PatchDistribution> gd{mode == CropMode::uniform ? u : *generated_dist};
  const std::vector<PatchDistribution> sd{mode == CropMode::uniform ? u : *style_dist};
  const ag::Var g(swapae::batch_of(c, {&generated})), st(swapae::batch_of(c, {&style}));
  double total = 0;
  for (int t = 0; t < trials; ++t) {
    const ag::Var crop = ag::crop(g, swapae::boxes_for(local, gd, 1, s.rng), c.patch_size, c.patch_size);
    const ag::Var refs = ag::crop(st, swapae::boxes_for(local, sd, c.n_ref, s.rng), c.patch_size, c.patch_size);
    total += ag::softplus_mean(s.Dp(crop, refs), -1.0f).item();
  }
  return total / trials;
}

// One alternating update: discriminators first on detached fakes, then E and G
// through the freshly updated discriminators.
inline SwapLosses training_step(SwapAEState& s, std::span<const TrainingPair> batch, const Classifier* cam_classifier = nullptr) {
  using ag::Var;
  const auto& c = s.config();
  if (batch.empty()) throw InvalidArgument("training_step: empty batch");
  const int b = static_cast<int>(batch.size());
  std::vector<const Image*> content, style;
  std::vector<int> content_targets, style_targets;
  for (const auto& p : batch) {
    content.push_back(p.content);
    style.push_back(p.style);
    content_targets.push_back(p.content_target);
    style_targets.push_back(p.style_target);
  }
  const Var x1(swapae::batch_of(c, content)), x2(swapae::batch_of(c, style));
  const Var real = ag::concat_batch(x1, x2);
  auto [zc, zs] = s.E(real);
  const Var out = s.G(ag::concat_batch(zc, ag::slice_batch(zc, 0, b)), ag::concat_batch(zs, ag::slice_batch(zs, b, b)));
  const Var recon = ag::slice_batch(out, 0, 2 * b);
  const Var swapped = ag::slice_batch(out, 2 * b, b);

  SwapLosses l;
  l.step = s.step;
  const bool gan = c.gan_enabled();
  Var fake_crop, real_crop, refs;
  if (gan) {
    std::vector<PatchDistribution> style_d;
    if (c.crop_mode == CropMode::bias_tailored && cam_classifier) {
      std::vector<const Image*> need;
      std::vector<int> need_cls;
      for (const auto& p : batch)
        if (!p.style_distribution) {
          need.push_back(p.style);
          need_cls.push_back(p.style_target);
        }
      auto computed = need.empty() ? std::vector<PatchDistribution>{} : swapae::distributions_for(c, cam_classifier, need, need_cls);
      std::size_t k = 0;
      for (const auto& p : batch) style_d.push_back(p.style_distribution ? *p.style_distribution : computed[k++]);
    } else if (c.crop_mode == CropMode::bias_tailored) {
      for (const auto& p : batch) {
        if (!p.style_distribution) throw InvalidArgument("bias_tailored crop mode needs CAM distributions for every style image");
        style_d.push_back(*p.style_distribution);
      }
    } else {
      style_d = swapae::distributions_for(c, nullptr, style, style_targets);
    }
    std::vector<Image> swapped_images;
    for (int i = 0; i < b; ++i) swapped_images.push_back(swapae::to_image(swapped.value(), i));
    std::vector<const Image*> sp;
    for (const auto& im : swapped_images) sp.push_back(&im);
    const auto fake_d = swapae::distributions_for(c, cam_classifier, sp, content_targets);
    fake_crop = ag::crop(swapped, swapae::boxes_for(c, fake_d, 1, s.rng), c.patch_size, c.patch_size);
    real_crop = ag::crop(x2, swapae::boxes_for(c, style_d, 1, s.rng), c.patch_size, c.patch_size);
    refs = ag::crop(x2, swapae::boxes_for(c, style_d, c.n_ref, s.rng), c.patch_size, c.patch_size);

    s.opt_d.zero_grad();
    const Var d_real = s.D(real);
    const Var d_fake = s.D(ag::detach(out));
    const Var ld_image = ag::add(ag::softplus_mean(d_real, -1.0f),
                                 ag::scale(ag::add(ag::softplus_mean(ag::slice_batch(d_fake, 0, 2 * b), 1.0f),
                                                   ag::softplus_mean(ag::slice_batch(d_fake, 2 * b, b), 1.0f)),
                                           0.5f));
    const Var ld_patch = ag::add(ag::softplus_mean(s.Dp(real_crop, refs), -1.0f), ag::softplus_mean(s.Dp(ag::detach(fake_crop), refs), 1.0f));
    l.d_image = ld_image.item();
    l.d_patch = ld_patch.item();
    swapae::check_finite(l.d_image, "discriminator", s.step);
    swapae::check_finite(l.d_patch, "patch discriminator", s.step);
    ag::backward(ag::add(ld_image, ld_patch));
    s.opt_d.step();
  }

  s.opt_g.zero_grad();
  // Squared L2 norm per image, averaged over the batch.
  const Var l_recon = ag::scale(ag::mse(recon, real), static_cast<float>(c.channels * c.height * c.width));
  Var total = ag::scale(l_recon, static_cast<float>(c.lambda_recon));
  l.recon = l_recon.item();
  if (gan) {
    const Var d_out = s.D(out);
    const Var l_gr = ag::softplus_mean(ag::slice_batch(d_out, 0, 2 * b), -1.0f);
    const Var l_gs = ag::softplus_mean(ag::slice_batch(d_out, 2 * b, b), -1.0f);
    const Var l_co = ag::softplus_mean(s.Dp(fake_crop, refs), -1.0f);
    l.gan_recon = l_gr.item();
    l.gan_swap = l_gs.item();
    l.cooccur = l_co.item();
    total = ag::add(total, ag::scale(l_gr, static_cast<float>(c.lambda_gan_recon)));
    total = ag::add(total, ag::scale(l_gs, static_cast<float>(c.lambda_gan_swap)));
    total = ag::add(total, ag::scale(l_co, static_cast<float>(c.lambda_cooccur)));
  }
  swapae::check_finite(l.recon, "reconstruction", s.step);
  swapae::check_finite(l.gan_recon, "GAN reconstruction", s.step);
  swapae::check_finite(l.gan_swap, "GAN swap", s.step);
  swapae::check_finite(l.cooccur, "co-occurrence", s.step);
  ag::backward(total);
  s.opt_g.step();
  ++s.step;
  return l;
}

using PairSampler = std::function<std::vector<TrainingPair>(std::mt19937_64&)>;
using StepCallback = std::function<void(const SwapLosses&, const SwapAEState&)>;

// Runs until s.step reaches `until_step`, drawing each batch from `sampler`
// with the state's own rng.
inline std::vector<SwapLosses> train_swapae(SwapAEState& s, long until_step, const PairSampler& sampler, const Classifier* cam_classifier,
                                            const StepCallback& on_step = {}) {
  std::vector<SwapLosses> log;
  while (s.step < until_step) {
    const auto batch = sampler(s.rng);
    log.push_back(training_step(s, batch, cam_classifier));
    if (on_step) on_step(log.back(), s);
  }
  return log;
}

inline std::vector<Image> swap_generate_batch(const SwapAEState& s, const std::vector<const Image*>& content,
                                              const std::vector<const Image*>& style, int batch = 128) {
  if (content.size() != style.size()) throw InvalidArgument("swap_generate: content/style count mismatch");
  if (s.step == 0) std::cerr << "warning: swap_generate called on an untrained SwapAE state\n";
  std::vector<Image> out;
  out.reserve(content.size());
  for (std::size_t start = 0; start < content.size(); start += batch) {
    const std::size_t end = std::min(content.size(), start + batch);
    const std::vector<const Image*> c(content.begin() + start, content.begin() + end), st(style.begin() + start, style.begin() + end);
    const auto zc = s.E(ag::Var(swapae::batch_of(s.config(), c))).first;
    const auto zs = s.E(ag::Var(swapae::batch_of(s.config(), st))).second;
    const ag::Var g = s.G(zc, zs);
    for (std::size_t i = 0; i < c.size(); ++i) out.push_back(swapae::to_image(g.value(), static_cast<int>(i)));
  }
  return out;
}

inline Image swap_generate(const SwapAEState& s, const Image& content, const Image& style) {
  return swap_generate_batch(s, {&content}, {&style}).front();
}

// ---- persistence -----------------------------------------------------------

inline constexpr std::uint32_t kSwapAEVersion = 1;

inline void save_swapae(const fs::path& path, const SwapAEState& s) {
  io::BinaryWriter w(path, "BSAE", kSwapAEVersion);
  w.str(to_json(s.config()).dump());
  w.i64(s.step);
  std::ostringstream rs;
  rs << s.rng;
  w.str(rs.str());
  nn::write_params(w, s.all_params());
  s.opt_g.save(w);
  s.opt_d.save(w);
  w.close();
}

inline SwapAEState load_swapae(const fs::path& path) {
  io::BinaryReader r(path, "BSAE", kSwapAEVersion);
  json cfg;
  try {
    cfg = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad SwapAE header: " + e.what());
  }
  SwapAEState s(swapae_config_from_json(cfg));
  s.step = r.i64();
  std::istringstream rs(r.str());
  rs >> s.rng;
  if (!rs) throw FormatError(path.string() + ": bad rng state");
  nn::read_params(r, s.all_params());
  s.opt_g.load(r);
  s.opt_d.load(r);
  return s;
}

inline void write_swap_losses(const fs::path& path, const std::vector<SwapLosses>& log) {
  std::ostringstream os;
  os.precision(8);
  os << "step,recon,gan_recon,gan_swap,cooccur,d_image,d_patch\n";
  for (const auto& l : log)
    os << l.step << ',' << l.recon << ',' << l.gan_recon << ',' << l.gan_swap << ',' << l.cooccur << ',' << l.d_image << ',' << l.d_patch << '\n';
  io::write_text(path, os.str());
}

// Rows of (content | style | swapped).
inline void write_sample_grid(const fs::path& path, const SwapAEState& s, const std::vector<const Image*>& content,
                              const std::vector<const Image*>& style) {
  const auto swapped = swap_generate_batch(s, content, style);
  std::vector<Image> cells;
  for (std::size_t i = 0; i < content.size(); ++i) {
    cells.push_back(*content[i]);
    cells.push_back(*style[i]);
    cells.push_back(swapped[i]);
  }
  write_ppm(path, tile_images(cells, 3));
}

}  // namespace biaswap
