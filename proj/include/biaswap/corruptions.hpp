#pragma once

// Texture corruptions for the Corrupted-CIFAR10 style benchmark. Every
// corruption is a pure function of (image, severity, seed). Severity tables
// follow the 32x32 settings of the common corruption benchmark.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "biaswap/image.hpp"

namespace biaswap::corrupt {

inline constexpr int kMinSeverity = 1;
inline constexpr int kMaxSeverity = 5;
inline constexpr int kDefaultSeverity = 4;

using CorruptionFn = std::function<Image(const Image&, int severity, std::uint64_t seed)>;

namespace detail {

inline float clip01(float v) { return std::clamp(v, 0.0f, 1.0f); }

template <class F>
Image map_hsv(const Image& in, F f) {
  if (in.channels != 3) throw InvalidArgument("HSV corruption expects an RGB image");
  Image out = in;
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      Hsv c = rgb_to_hsv(in.at(y, x, 0), in.at(y, x, 1), in.at(y, x, 2));
      f(c);
      const auto rgb = hsv_to_rgb(c);
      for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = clip01(rgb[ch]);
    }
  return out;
}

inline Image brightness(const Image& in, int s, std::uint64_t) {
  static constexpr std::array<float, 5> c{0.1f, 0.2f, 0.3f, 0.4f, 0.5f};
  return map_hsv(in, [d = c[s - 1]](Hsv& h) { h.v = clip01(h.v + d); });
}

inline Image contrast(const Image& in, int s, std::uint64_t) {
  static constexpr std::array<float, 5> c{0.4f, 0.3f, 0.2f, 0.1f, 0.05f};
  Image out = in;
  for (int ch = 0; ch < in.channels; ++ch) {
    double m = 0;
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x) m += in.at(y, x, ch);
    m /= static_cast<double>(in.height) * in.width;
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x)
        out.at(y, x, ch) = clip01(static_cast<float>((in.at(y, x, ch) - m) * c[s - 1] + m));
  }
  return out;
}

inline Image saturate(const Image& in, int s, std::uint64_t) {
  static constexpr std::array<std::array<float, 2>, 5> c{{{0.3f, 0.0f}, {0.1f, 0.0f}, {2.0f, 0.0f}, {5.0f, 0.1f}, {20.0f, 0.2f}}};
  return map_hsv(in, [k = c[s - 1]](Hsv& h) { h.s = clip01(h.s * k[0] + k[1]); });
}

inline Image pixelate(const Image& in, int s, std::uint64_t) {
  static constexpr std::array<float, 5> c{0.6f, 0.5f, 0.4f, 0.3f, 0.25f};
  const int sh = std::max(1, static_cast<int>(in.height * c[s - 1]));
  const int sw = std::max(1, static_cast<int>(in.width * c[s - 1]));
  // Box downsample to (sh, sw), then nearest upsample back.
  Image small(sh, sw, in.channels);
  for (int y = 0; y < sh; ++y)
    for (int x = 0; x < sw; ++x) {
      const int y0 = y * in.height / sh, y1 = std::max(y0 + 1, (y + 1) * in.height / sh);
      const int x0 = x * in.width / sw, x1 = std::max(x0 + 1, (x + 1) * in.width / sw);
      for (int ch = 0; ch < in.channels; ++ch) {
        double acc = 0;
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) acc += in.at(yy, xx, ch);
        small.at(y, x, ch) = static_cast<float>(acc / ((y1 - y0) * (x1 - x0)));
      }
    }
  Image out(in.height, in.width, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int ch = 0; ch < in.channels; ++ch) out.at(y, x, ch) = small.at(y * sh / in.height, x * sw / in.width, ch);
  return out;
}

inline Image gaussian_noise(const Image& in, int s, std::uint64_t seed) {
  static constexpr std::array<float, 5> c{0.04f, 0.06f, 0.08f, 0.09f, 0.10f};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, c[s - 1]);
  Image out = in;
  for (auto& v : out.pixels) v = clip01(v + n(rng));
  return out;
}

inline Image shot_noise(const Image& in, int s, std::uint64_t seed) {
  static constexpr std::array<float, 5> c{500.0f, 250.0f, 100.0f, 75.0f, 50.0f};
  std::mt19937_64 rng(seed);
  Image out = in;
  for (auto& v : out.pixels) {
    std::poisson_distribution<int> p(static_cast<double>(v) * c[s - 1]);
    v = clip01(static_cast<float>(p(rng)) / c[s - 1]);
  }
  return out;
}

inline Image impulse_noise(const Image& in, int s, std::uint64_t seed) {
  static constexpr std::array<float, 5> c{0.01f, 0.02f, 0.03f, 0.05f, 0.07f};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image out = in;
  for (auto& v : out.pixels) {
    const float r = u(rng);
    if (r < c[s - 1] / 2)
      v = 0.0f;
    else if (r < c[s - 1])
      v = 1.0f;
  }
  return out;
}

inline Image speckle_noise(const Image& in, int s, std::uint64_t seed) {
  static constexpr std::array<float, 5> c{0.06f, 0.1f, 0.12f, 0.16f, 0.2f};
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, c[s - 1]);
  Image out = in;
  for (auto& v : out.pixels) v = clip01(v + v * n(rng));
  return out;
}

inline Image gaussian_blur(const Image& in, int s, std::uint64_t) {
  static constexpr std::array<float, 5> c{0.4f, 0.6f, 0.7f, 0.8f, 1.0f};
  const float sigma = c[s - 1];
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<float> k(2 * r + 1);
  float ks = 0;
  for (int i = -r; i <= r; ++i) ks += (k[i + r] = std::exp(-0.5f * i * i / (sigma * sigma)));
  for (auto& v : k) v /= ks;
  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x)
        for (int ch = 0; ch < src.channels; ++ch) {
          float acc = 0;
          for (int i = -r; i <= r; ++i) {
            const int yy = horizontal ? y : std::clamp(y + i, 0, src.height - 1);
            const int xx = horizontal ? std::clamp(x + i, 0, src.width - 1) : x;
            acc += k[i + r] * src.at(yy, xx, ch);
          }
          dst.at(y, x, ch) = acc;
        }
    return dst;
  };
  return pass(pass(in, true), false);
}

// Smooth multi-octave value noise standing in for the plasma fractal.
inline Image fog(const Image& in, int s, std::uint64_t seed) {
  static constexpr std::array<std::array<float, 2>, 5> c{{{0.2f, 3.0f}, {0.5f, 3.0f}, {0.75f, 2.5f}, {1.0f, 2.0f}, {1.5f, 1.75f}}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> field(static_cast<std::size_t>(in.height) * in.width, 0.0f);
  float amp = 1.0f, total = 0.0f;
  for (int cells = 2; cells <= 16; cells *= 2) {
    std::vector<float> grid(static_cast<std::size_t>(cells + 1) * (cells + 1));
    for (auto& g : grid) g = u(rng);
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x) {
        const float gy = static_cast<float>(y) * cells / in.height, gx = static_cast<float>(x) * cells / in.width;
        const int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
        const float fy = gy - iy, fx = gx - ix;
        auto g = [&](int a, int b) { return grid[static_cast<std::size_t>(a) * (cells + 1) + b]; };
        const float v = (1 - fy) * ((1 - fx) * g(iy, ix) + fx * g(iy, ix + 1)) + fy * ((1 - fx) * g(iy + 1, ix) + fx * g(iy + 1, ix + 1));
        field[static_cast<std::size_t>(y) * in.width + x] += amp * v;
      }
    total += amp;
    amp /= c[s - 1][1];
  }
  Image out = in;
  const float mx = *std::max_element(in.pixels.begin(), in.pixels.end());
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int ch = 0; ch < in.channels; ++ch) {
        const float v = in.at(y, x, ch) + c[s - 1][0] * field[static_cast<std::size_t>(y) * in.width + x] / total;
        out.at(y, x, ch) = clip01(v * mx / (mx + c[s - 1][0]));
      }
  return out;
}

}  // namespace detail

// Registry of available corruptions. brightness, contrast, saturate and
// pixelate form the mandatory set; the rest are plug-ins.
inline const std::map<std::string, CorruptionFn>& registry() {
  static const std::map<std::string, CorruptionFn> r{
      {"brightness", detail::brightness},       {"contrast", detail::contrast},
      {"saturate", detail::saturate},           {"pixelate", detail::pixelate},
      {"gaussian_noise", detail::gaussian_noise}, {"shot_noise", detail::shot_noise},
      {"impulse_noise", detail::impulse_noise}, {"speckle_noise", detail::speckle_noise},
      {"gaussian_blur", detail::gaussian_blur}, {"fog", detail::fog},
  };
  return r;
}

inline const std::vector<std::string>& default_corruptions() {
  static const std::vector<std::string> d{"brightness",    "contrast",   "saturate",      "pixelate",      "gaussian_noise",
                                          "shot_noise",    "impulse_noise", "speckle_noise", "gaussian_blur", "fog"};
  return d;
}

inline void validate(const std::string& name, int severity) {
  if (!registry().count(name)) throw InvalidArgument("unknown corruption '" + name + "'");
  if (severity < kMinSeverity || severity > kMaxSeverity)
    throw InvalidArgument("corruption severity " + std::to_string(severity) + " outside [1,5]");
}

inline Image apply(const std::string& name, const Image& in, int severity, std::uint64_t seed) {
  validate(name, severity);
  return registry().at(name)(in, severity, seed);
}

}  // namespace biaswap::corrupt
