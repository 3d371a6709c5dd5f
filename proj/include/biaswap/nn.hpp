#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "biaswap/autograd.hpp"
#include "biaswap/serialize.hpp"

namespace biaswap::nn {

using ag::Var;

struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

inline Var make_param(Shape shape, float stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.vec()) v = dist(rng);
  return Var(std::move(t), true);
}

inline Var make_bias(int n, float value = 0.0f) { return Var(Tensor({n}, value), true); }

struct Conv2d {
  Var weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride_, int pad_, std::mt19937_64& rng, float gain = std::sqrt(2.0f))
      : weight(make_param({out, in, k, k}, gain / std::sqrt(static_cast<float>(in * k * k)), rng)),
        bias(make_bias(out)),
        stride(stride_),
        pad(pad_) {}

  Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct Linear {
  Var weight, bias;

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, float gain = 1.0f, float bias_init = 0.0f)
      : weight(make_param({out, in}, gain / std::sqrt(static_cast<float>(in)), rng)), bias(make_bias(out, bias_init)) {}

  Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// Style-modulated convolution: input channels are scaled by an affine map of
// the style vector, followed by optional weight demodulation.
struct ModulatedConv2d {
  Var weight, bias;
  Linear affine;
  int pad = 0;
  bool demodulate = true;

  ModulatedConv2d() = default;
  ModulatedConv2d(int in, int out, int k, int style_dim, std::mt19937_64& rng, bool demod = true)
      : weight(make_param({out, in, k, k}, 1.0f / std::sqrt(static_cast<float>(in * k * k)), rng)),
        bias(make_bias(out)),
        affine(style_dim, in, rng, 1.0f, 1.0f),
        pad(k / 2),
        demodulate(demod) {}

  Var operator()(const Var& x, const Var& style) const {
    Var s = affine(style);
    Var h = ag::conv2d(ag::channel_mul(x, s), weight, Var(), 1, pad);
    if (demodulate) h = ag::channel_mul(h, ag::demodulation(weight, s));
    return ag::add_channel_bias(h, bias);
  }
  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
    affine.collect(out, prefix + ".affine");
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  void step() {
    ++t_;
    const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var p = params_[i].var;
      const Tensor& g = p.grad();
      Tensor& w = p.mutable_value();
      for (std::size_t j = 0; j < w.numel(); ++j) {
        const double gj = g[j];
        m_[i][j] = static_cast<float>(cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj);
        v_[i][j] = static_cast<float>(cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj);
        const double mh = m_[i][j] / b1t, vh = v_[i][j] / b2t;
        w[j] -= static_cast<float>(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  void save(io::BinaryWriter& w) const {
    w.i64(t_);
    w.u32(static_cast<std::uint32_t>(m_.size()));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      w.tensor(m_[i]);
      w.tensor(v_[i]);
    }
  }
  void load(io::BinaryReader& r) {
    t_ = r.i64();
    const auto n = r.u32();
    if (n != m_.size()) throw FormatError("optimizer state does not match parameter count");
    for (std::size_t i = 0; i < n; ++i) {
      m_[i] = r.tensor();
      v_[i] = r.tensor();
    }
  }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

inline void write_params(io::BinaryWriter& w, const ParamList& params) {
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.tensor(p.var.value());
  }
}

// Loads parameter values in place; names and shapes must match exactly.
inline void read_params(io::BinaryReader& r, const ParamList& params) {
  const auto n = r.u32();
  if (n != params.size())
    throw FormatError("checkpoint holds " + std::to_string(n) + " tensors, model expects " + std::to_string(params.size()));
  for (const auto& p : params) {
    const std::string name = r.str();
    Tensor t = r.tensor();
    if (name != p.name) throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' was expected");
    if (t.shape() != p.var.shape()) throw FormatError("shape mismatch for " + name);
    Var(p.var).mutable_value() = std::move(t);
  }
}

inline bool params_equal(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].var.value() == b[i].var.value())) return false;
  return true;
}

}  // namespace biaswap::nn
