#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "biaswap/error.hpp"
#include "biaswap/tensor.hpp"

namespace biaswap {

// H x W x C float image, values in [0,1], interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
  float mean() const {
    double s = 0;
    for (float v : pixels) s += v;
    return pixels.empty() ? 0.0f : static_cast<float>(s / pixels.size());
  }

  bool operator==(const Image&) const = default;
};

// Packs images into an NCHW batch tensor, applying (x - 0.5) / 0.5 when normalize is set.
inline Tensor to_batch(std::span<const Image* const> images, bool normalize) {
  if (images.empty()) throw InvalidArgument("to_batch: empty batch");
  const Image& f = *images.front();
  Tensor t({static_cast<int>(images.size()), f.channels, f.height, f.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& im = *images[n];
    if (!im.same_shape(f)) throw InvalidArgument("to_batch: mixed image shapes");
    for (int c = 0; c < f.channels; ++c)
      for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) {
          const float v = im.at(y, x, c);
          t.at(static_cast<int>(n), c, y, x) = normalize ? (v - 0.5f) / 0.5f : v;
        }
  }
  return t;
}

inline Tensor to_batch(const std::vector<Image>& images, bool normalize) {
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return to_batch(std::span<const Image* const>(ptrs), normalize);
}

// Inverse of to_batch for a single sample of an NCHW tensor with values in [0,1].
inline Image from_batch(const Tensor& t, int n) {
  Image im(t.dim(2), t.dim(3), t.dim(1));
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) im.at(y, x, c) = t.at(n, c, y, x);
  return im;
}

struct Hsv {
  float h, s, v;
};

inline Hsv rgb_to_hsv(float r, float g, float b) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
  float h = 0;
  if (d > 0) {
    if (mx == r)
      h = std::fmod((g - b) / d, 6.0f);
    else if (mx == g)
      h = (b - r) / d + 2.0f;
    else
      h = (r - g) / d + 4.0f;
    h /= 6.0f;
    if (h < 0) h += 1.0f;
  }
  return {h, mx > 0 ? d / mx : 0.0f, mx};
}

inline std::array<float, 3> hsv_to_rgb(Hsv c) {
  const float h6 = std::fmod(c.h, 1.0f) * 6.0f;
  const int i = static_cast<int>(h6) % 6;
  const float f = h6 - std::floor(h6);
  const float p = c.v * (1 - c.s), q = c.v * (1 - c.s * f), t = c.v * (1 - c.s * (1 - f));
  switch (i) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
  }
}

// Binary PPM (P6); grayscale images are replicated into RGB.
inline void write_ppm(const std::filesystem::path& path, const Image& im) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << im.width << ' ' << im.height << "\n255\n";
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = im.at(y, x, im.channels == 3 ? c : 0);
        out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
      }
}

// Tiles images (all the same shape) into a grid with `cols` columns and a 1px gap.
inline Image tile_images(const std::vector<Image>& images, int cols) {
  if (images.empty()) return {};
  const Image& f = images.front();
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  Image out(rows * (f.height + 1) + 1, cols * (f.width + 1) + 1, 3, 0.25f);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x)
        for (int ch = 0; ch < 3; ++ch)
          out.at(1 + r * (f.height + 1) + y, 1 + c * (f.width + 1) + x, ch) = images[i].at(y, x, f.channels == 3 ? ch : 0);
  }
  return out;
}

}  // namespace biaswap
