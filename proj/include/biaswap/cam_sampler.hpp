#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "biaswap/classifiers.hpp"

namespace biaswap {

// I_c(x,y) on the classifier's final feature grid, row-major.
struct ImportanceMap {
  int height = 0;
  int width = 0;
  int class_index = 0;
  std::string source_example_id;
  std::vector<double> values;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double mean() const {
    double s = 0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
};

struct PatchDistribution {
  int height = 0;
  int width = 0;
  double temperature = 1;
  std::vector<double> probabilities;

  double at(int y, int x) const { return probabilities[static_cast<std::size_t>(y) * width + x]; }
};

enum class CropMode { uniform, bias_tailored };

inline std::string to_string(CropMode m) { return m == CropMode::uniform ? "uniform" : "bias_tailored"; }
inline CropMode parse_crop_mode(const std::string& s) {
  if (s == "uniform") return CropMode::uniform;
  if (s == "bias_tailored") return CropMode::bias_tailored;
  throw InvalidArgument("unknown crop mode '" + s + "'");
}

// Maps of sample n in a FeatureMaps batch.
inline ImportanceMap cam_from_features(const FeatureMaps& f, int n, int c, std::string id = {}) {
  const int ch = f.maps.dim(1), h = f.maps.dim(2), w = f.maps.dim(3);
  if (c < 0 || c >= f.weights.dim(0)) throw InvalidArgument("CAM class index outside [0,K)");
  ImportanceMap m{h, w, c, std::move(id), std::vector<double>(static_cast<std::size_t>(h) * w, 0.0)};
  for (int k = 0; k < ch; ++k) {
    const double wk = f.weights[static_cast<std::size_t>(c) * ch + k];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) m.values[static_cast<std::size_t>(y) * w + x] += wk * f.maps.at(n, k, y, x);
  }
  return m;
}

inline ImportanceMap compute_cam(const Classifier& clf, const Image& image, int c, std::string id = {}) {
  const FeatureMaps f = feature_maps(clf, std::span<const Image>(&image, 1));
  return cam_from_features(f, 0, c, std::move(id));
}

// Batched CAMs, each for its own class index.
inline std::vector<ImportanceMap> compute_cams(const Classifier& clf, const std::vector<const Image*>& images, const std::vector<int>& classes,
                                               int batch = 256) {
  if (images.size() != classes.size()) throw InvalidArgument("compute_cams: one class per image required");
  std::vector<ImportanceMap> out;
  out.reserve(images.size());
  std::vector<Image> chunk;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    chunk.clear();
    for (std::size_t i = start; i < std::min(images.size(), start + batch); ++i) chunk.push_back(*images[i]);
    const FeatureMaps f = feature_maps(clf, chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(cam_from_features(f, static_cast<int>(i), classes[start + i]));
  }
  return out;
}

// Logit reconstructed from a CAM: mean over locations plus the class bias.
inline double cam_logit(const ImportanceMap& m, double bias) { return m.mean() + bias; }

inline PatchDistribution to_sampling_distribution(const ImportanceMap& m, double tau) {
  if (!(tau > 0)) throw InvalidArgument("temperature must be positive");
  if (m.values.empty()) throw InvalidArgument("empty importance map");
  PatchDistribution d{m.height, m.width, tau, std::vector<double>(m.values.size())};
  const double mx = *std::max_element(m.values.begin(), m.values.end());
  double z = 0;
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (!std::isfinite(m.values[i])) throw InvalidArgument("non-finite importance value");
    z += (d.probabilities[i] = std::exp((m.values[i] - mx) / tau));
  }
  for (auto& p : d.probabilities) p /= z;
  return d;
}

inline PatchDistribution uniform_distribution(int h, int w) {
  return {h, w, 1.0, std::vector<double>(static_cast<std::size_t>(h) * w, 1.0 / (static_cast<double>(h) * w))};
}

struct PatchSample {
  int cell_y = 0, cell_x = 0;      // feature-grid location the center was drawn from
  int center_y = 0, center_x = 0;  // pixel center
  int top = 0, left = 0;           // clamped crop origin
};

// Draws n crop placements. A grid cell is chosen (from `dist`, or uniformly in
// uniform mode), then a pixel center uniformly inside that cell's stride x
// stride footprint; the crop is clamped to the image.
inline std::vector<PatchSample> sample_patch_boxes(int image_h, int image_w, const PatchDistribution& dist, int stride, int patch_size,
                                                   int n, CropMode mode, std::mt19937_64& rng) {
  if (patch_size <= 0 || patch_size > image_h || patch_size > image_w)
    throw InvalidArgument("patch size " + std::to_string(patch_size) + " does not fit a " + std::to_string(image_h) + "x" +
                          std::to_string(image_w) + " image");
  if (stride <= 0) throw InvalidArgument("feature stride must be positive");
  const int gh = dist.height, gw = dist.width;
  if (gh * stride < image_h - stride + 1 || gw * stride < image_w - stride + 1)
    throw InvalidArgument("feature grid does not cover the image at the given stride");
  std::vector<double> weights = mode == CropMode::uniform ? std::vector<double>(static_cast<std::size_t>(gh) * gw, 1.0) : dist.probabilities;
  if (weights.size() != static_cast<std::size_t>(gh) * gw) throw InvalidArgument("distribution size does not match its grid");
  std::discrete_distribution<int> cell(weights.begin(), weights.end());
  std::vector<PatchSample> out(n);
  for (auto& s : out) {
    const int idx = cell(rng);
    s.cell_y = idx / gw;
    s.cell_x = idx % gw;
    const int y0 = s.cell_y * stride, y1 = std::min(image_h, y0 + stride);
    const int x0 = s.cell_x * stride, x1 = std::min(image_w, x0 + stride);
    s.center_y = std::uniform_int_distribution<int>(y0, y1 - 1)(rng);
    s.center_x = std::uniform_int_distribution<int>(x0, x1 - 1)(rng);
    s.top = std::clamp(s.center_y - patch_size / 2, 0, image_h - patch_size);
    s.left = std::clamp(s.center_x - patch_size / 2, 0, image_w - patch_size);
  }
  return out;
}

struct Patch {
  Image crop;
  PatchSample where;
};

inline std::vector<Patch> sample_patches(const Image& image, const PatchDistribution& dist, int stride, int patch_size, int n,
                                         CropMode mode, std::mt19937_64& rng) {
  std::vector<Patch> out;
  for (const auto& s : sample_patch_boxes(image.height, image.width, dist, stride, patch_size, n, mode, rng)) {
    Image c(patch_size, patch_size, image.channels);
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x)
        for (int ch = 0; ch < image.channels; ++ch) c.at(y, x, ch) = image.at(s.top + y, s.left + x, ch);
    out.push_back({std::move(c), s});
  }
  return out;
}

// Minimal .npy (v1.0, little-endian float32) writer for CAM grids.
inline void write_npy(const fs::path& path, const std::vector<double>& values, int h, int w) {
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + std::to_string(h) + ", " + std::to_string(w) + "), }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::string bytes("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  bytes.push_back(static_cast<char>(len & 0xff));
  bytes.push_back(static_cast<char>(len >> 8));
  bytes += header;
  for (double v : values) {
    const float f = static_cast<float>(v);
    bytes.append(reinterpret_cast<const char*>(&f), sizeof f);
  }
  io::write_text(path, bytes);
}

// Heatmap of the map upsampled to the image, blended over a dimmed copy of it.
inline Image render_cam(const ImportanceMap& m, const Image& image) {
  const double lo = *std::min_element(m.values.begin(), m.values.end());
  const double hi = *std::max_element(m.values.begin(), m.values.end());
  Image out(image.height, image.width, 3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const int gy = std::min(m.height - 1, y * m.height / image.height), gx = std::min(m.width - 1, x * m.width / image.width);
      const float t = hi > lo ? static_cast<float>((m.at(gy, gx) - lo) / (hi - lo)) : 0.0f;
      const float heat[3] = {std::clamp(1.5f - std::abs(4 * t - 3), 0.0f, 1.0f), std::clamp(1.5f - std::abs(4 * t - 2), 0.0f, 1.0f),
                             std::clamp(1.5f - std::abs(4 * t - 1), 0.0f, 1.0f)};
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.5f * heat[c] + 0.5f * image.at(y, x, image.channels == 3 ? c : 0);
    }
  return out;
}

inline void dump_cam(const fs::path& dir, const ImportanceMap& m, const Image& image) {
  const std::string stem = m.source_example_id.empty() ? "cam" : m.source_example_id;
  write_npy(dir / (stem + ".npy"), m.values, m.height, m.width);
  write_ppm(dir / (stem + ".ppm"), render_cam(m, image));
}

}  // namespace biaswap
