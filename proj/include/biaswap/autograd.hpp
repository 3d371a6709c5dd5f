#pragma once

// Minimal reverse-mode automatic differentiation over float32 tensors.
//
// A Var wraps a shared graph node. Ops record a backward closure only when at
// least one input requires a gradient, so inference-time graphs are free.
// Everything is single-threaded and deterministic.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "biaswap/tensor.hpp"

namespace biaswap::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad() {
    if (grad.numel() != value.numel() || grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.numel() == value.numel() && !grad.empty(); }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor v, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->ensure_grad(); }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t rank() const { return node_->value.rank(); }
  float item() const { return node_->value[0]; }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(0.0f);
  }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var detach(const Var& v) { return Var(v.value(), false); }

// Builds a result node; the backward closure is kept only if some input needs it.
inline Var make_result(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

inline void backward(const Var& loss) {
  if (loss.value().numel() != 1) throw InvalidArgument("backward() expects a scalar loss");
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
}

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }
inline bool wants(Node& n, std::size_t i) { return i < n.inputs.size() && n.inputs[i] && n.inputs[i]->requires_grad; }

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    if (!wants(self, 0)) return;
    Node& xn = in(self, 0);
    auto& gx = xn.ensure_grad();
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i] * df(xn.value[i], self.value[i]);
  });
}

inline void check_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Var relu(const Var& x) {
  return detail::unary(x, [](float v) { return v < 0 ? 0.0f : v; }, [](float v, float) { return v > 0 ? 1.0f : 0.0f; });
}

inline Var leaky_relu(const Var& x, float slope = 0.2f) {
  return detail::unary(
      x, [slope](float v) { return v > 0 ? v : slope * v; }, [slope](float v, float) { return v > 0 ? 1.0f : slope; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](float, float y) { return y * (1.0f - y); });
}

inline Var tanh(const Var& x) {
  return detail::unary(x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

inline Var scale(const Var& x, float s) {
  return detail::unary(x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

inline Var add_scalar(const Var& x, float s) {
  return detail::unary(x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (detail::wants(self, k)) detail::in(self, k).ensure_grad() += self.grad;
  });
}

inline Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0f)); }

inline Var mul(const Var& a, const Var& b) {
  detail::check_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    Node& an = detail::in(self, 0);
    Node& bn = detail::in(self, 1);
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
}

// ---- shape ops -------------------------------------------------------------

inline Var reshape(const Var& x, Shape s) {
  Tensor out = x.value().reshaped(std::move(s));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

inline Var flatten(const Var& x) {
  const int n = x.dim(0);
  return reshape(x, {n, static_cast<int>(x.value().numel() / n)});
}

// [N,F1] ++ [N,F2] -> [N,F1+F2]
inline Var concat_features(const Var& a, const Var& b) {
  const int n = a.dim(0), f1 = a.dim(1), f2 = b.dim(1);
  if (b.dim(0) != n) throw InvalidArgument("concat_features: batch mismatch");
  Tensor out({n, f1 + f2});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * f1, f1, out.data() + i * (f1 + f2));
    std::copy_n(b.value().data() + i * f2, f2, out.data() + i * (f1 + f2) + f1);
  }
  return make_result(std::move(out), {a, b}, [n, f1, f2](Node& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::in(self, 0).ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < f1; ++j) g[i * f1 + j] += self.grad[i * (f1 + f2) + j];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::in(self, 1).ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < f2; ++j) g[i * f2 + j] += self.grad[i * (f1 + f2) + f1 + j];
    }
  });
}

// Concatenate along the batch dimension.
inline Var concat_batch(const Var& a, const Var& b) {
  Shape s = a.shape();
  if (b.shape().size() != s.size() || !std::equal(s.begin() + 1, s.end(), b.shape().begin() + 1))
    throw InvalidArgument("concat_batch: trailing shape mismatch");
  const std::size_t na = a.value().numel(), nb = b.value().numel();
  s[0] = a.dim(0) + b.dim(0);
  Tensor out(s);
  std::copy_n(a.value().data(), na, out.data());
  std::copy_n(b.value().data(), nb, out.data() + na);
  return make_result(std::move(out), {a, b}, [na, nb](Node& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::in(self, 0).ensure_grad();
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::in(self, 1).ensure_grad();
      for (std::size_t i = 0; i < nb; ++i) g[i] += self.grad[na + i];
    }
  });
}

// Rows [start, start + count) of the batch dimension.
inline Var slice_batch(const Var& x, int start, int count) {
  if (start < 0 || count <= 0 || start + count > x.dim(0)) throw InvalidArgument("slice_batch: range out of bounds");
  Shape s = x.shape();
  const std::size_t row = x.value().numel() / s[0], off = row * start, m = row * count;
  s[0] = count;
  Tensor out(s);
  std::copy_n(x.value().data() + off, m, out.data());
  return make_result(std::move(out), {x}, [off, m](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    for (std::size_t i = 0; i < m; ++i) g[off + i] += self.grad[i];
  });
}

// Nearest-neighbour 2x spatial upsampling of NCHW.
inline Var upsample2x(const Var& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, 2 * h, 2 * w});
  const auto& xv = x.value();
  for (int a = 0; a < n; ++a)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) out.at(a, ch, i, j) = xv.at(a, ch, i / 2, j / 2);
  return make_result(std::move(out), {x}, [n, c, h, w](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    for (int a = 0; a < n; ++a)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < 2 * h; ++i)
          for (int j = 0; j < 2 * w; ++j) g.at(a, ch, i / 2, j / 2) += self.grad.at(a, ch, i, j);
  });
}

// Global average pooling NCHW -> [N,C].
inline Var global_avg_pool(const Var& x) {
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  const float* xv = x.value().data();
  for (int i = 0; i < n * c; ++i) {
    double s = 0;
    for (int k = 0; k < hw; ++k) s += xv[static_cast<std::size_t>(i) * hw + k];
    out[i] = static_cast<float>(s / hw);
  }
  return make_result(std::move(out), {x}, [n, c, hw](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    for (int i = 0; i < n * c; ++i) {
      const float gi = self.grad[i] / static_cast<float>(hw);
      for (int k = 0; k < hw; ++k) g[static_cast<std::size_t>(i) * hw + k] += gi;
    }
  });
}

struct CropBox {
  int sample = 0;
  int top = 0;
  int left = 0;
};

// Extracts ph x pw crops; result is [boxes.size(), C, ph, pw].
inline Var crop(const Var& x, std::vector<CropBox> boxes, int ph, int pw) {
  const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
  for (const auto& b : boxes)
    if (b.sample < 0 || b.sample >= x.dim(0) || b.top < 0 || b.left < 0 || b.top + ph > h || b.left + pw > w)
      throw InvalidArgument("crop box out of bounds");
  const int m = static_cast<int>(boxes.size());
  Tensor out({m, c, ph, pw});
  const auto& xv = x.value();
  for (int k = 0; k < m; ++k)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < ph; ++i)
        for (int j = 0; j < pw; ++j) out.at(k, ch, i, j) = xv.at(boxes[k].sample, ch, boxes[k].top + i, boxes[k].left + j);
  return make_result(std::move(out), {x}, [boxes = std::move(boxes), c, ph, pw](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    for (std::size_t k = 0; k < boxes.size(); ++k)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ph; ++i)
          for (int j = 0; j < pw; ++j)
            g.at(boxes[k].sample, ch, boxes[k].top + i, boxes[k].left + j) += self.grad.at(static_cast<int>(k), ch, i, j);
  });
}

// Mean over consecutive groups of rows: [M*G, F] -> [M, F].
inline Var group_mean(const Var& x, int group) {
  const int rows = x.dim(0), f = static_cast<int>(x.value().numel() / rows);
  if (group <= 0 || rows % group) throw InvalidArgument("group_mean: rows not divisible by group");
  const int m = rows / group;
  Tensor out({m, f});
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < f; ++j) out[(r / group) * f + j] += x.value()[r * f + j] / static_cast<float>(group);
  return make_result(std::move(out), {x}, [group, rows, f](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < f; ++j) g[r * f + j] += self.grad[(r / group) * f + j] / static_cast<float>(group);
  });
}

// ---- channel-wise broadcasting --------------------------------------------

// x [N,C,...] times s [N,C].
inline Var channel_mul(const Var& x, const Var& s) {
  const int n = x.dim(0), c = x.dim(1);
  const int inner = static_cast<int>(x.value().numel() / (static_cast<std::size_t>(n) * c));
  if (s.dim(0) != n || s.dim(1) != c) throw InvalidArgument("channel_mul: scale shape mismatch");
  Tensor out(x.shape());
  for (int i = 0; i < n * c; ++i)
    for (int k = 0; k < inner; ++k) out[i * inner + k] = x.value()[i * inner + k] * s.value()[i];
  return make_result(std::move(out), {x, s}, [n, c, inner](Node& self) {
    Node& xn = detail::in(self, 0);
    Node& sn = detail::in(self, 1);
    if (xn.requires_grad) {
      auto& g = xn.ensure_grad();
      for (int i = 0; i < n * c; ++i)
        for (int k = 0; k < inner; ++k) g[i * inner + k] += self.grad[i * inner + k] * sn.value[i];
    }
    if (sn.requires_grad) {
      auto& g = sn.ensure_grad();
      for (int i = 0; i < n * c; ++i) {
        double acc = 0;
        for (int k = 0; k < inner; ++k) acc += self.grad[i * inner + k] * xn.value[i * inner + k];
        g[i] += static_cast<float>(acc);
      }
    }
  });
}

// x [N,C,...] plus per-channel bias b [C].
inline Var add_channel_bias(const Var& x, const Var& b) {
  const int n = x.dim(0), c = x.dim(1);
  const int inner = static_cast<int>(x.value().numel() / (static_cast<std::size_t>(n) * c));
  if (static_cast<int>(b.value().numel()) != c) throw InvalidArgument("add_channel_bias: bias size mismatch");
  Tensor out = x.value();
  for (int a = 0; a < n; ++a)
    for (int ch = 0; ch < c; ++ch)
      for (int k = 0; k < inner; ++k) out[(a * c + ch) * inner + k] += b.value()[ch];
  return make_result(std::move(out), {x, b}, [n, c, inner](Node& self) {
    if (detail::wants(self, 0)) detail::in(self, 0).ensure_grad() += self.grad;
    if (detail::wants(self, 1)) {
      auto& g = detail::in(self, 1).ensure_grad();
      for (int a = 0; a < n; ++a)
        for (int ch = 0; ch < c; ++ch) {
          double acc = 0;
          for (int k = 0; k < inner; ++k) acc += self.grad[(a * c + ch) * inner + k];
          g[ch] += static_cast<float>(acc);
        }
    }
  });
}

// Weight demodulation factors d[n,o] = (sum_{i,k} (w[o,i,k] * s[n,i])^2 + eps)^-1/2.
inline Var demodulation(const Var& w, const Var& s, float eps = 1e-8f) {
  const int o = w.dim(0), ci = w.dim(1);
  const int kk = static_cast<int>(w.value().numel() / (static_cast<std::size_t>(o) * ci));
  const int n = s.dim(0);
  if (s.dim(1) != ci) throw InvalidArgument("demodulation: style width mismatch");
  std::vector<float> wsq(static_cast<std::size_t>(o) * ci, 0.0f);
  for (int a = 0; a < o * ci; ++a)
    for (int k = 0; k < kk; ++k) wsq[a] += w.value()[a * kk + k] * w.value()[a * kk + k];
  Tensor out({n, o});
  for (int b = 0; b < n; ++b)
    for (int a = 0; a < o; ++a) {
      double acc = eps;
      for (int i = 0; i < ci; ++i) acc += wsq[a * ci + i] * s.value()[b * ci + i] * s.value()[b * ci + i];
      out[b * o + a] = static_cast<float>(1.0 / std::sqrt(acc));
    }
  return make_result(std::move(out), {w, s}, [o, ci, kk, n, wsq = std::move(wsq)](Node& self) {
    Node& wn = detail::in(self, 0);
    Node& sn = detail::in(self, 1);
    // d(d)/d(m) = -d^3 / 2 where m is the pre-sqrt sum.
    std::vector<float> gm(static_cast<std::size_t>(n) * o);
    for (std::size_t i = 0; i < gm.size(); ++i) {
      const float d = self.value[i];
      gm[i] = -0.5f * d * d * d * self.grad[i];
    }
    if (wn.requires_grad) {
      auto& g = wn.ensure_grad();
      for (int a = 0; a < o; ++a)
        for (int i = 0; i < ci; ++i) {
          double coef = 0;
          for (int b = 0; b < n; ++b) coef += gm[b * o + a] * sn.value[b * ci + i] * sn.value[b * ci + i];
          for (int k = 0; k < kk; ++k) g[(a * ci + i) * kk + k] += static_cast<float>(2.0 * coef * wn.value[(a * ci + i) * kk + k]);
        }
    }
    if (sn.requires_grad) {
      auto& g = sn.ensure_grad();
      for (int b = 0; b < n; ++b)
        for (int i = 0; i < ci; ++i) {
          double acc = 0;
          for (int a = 0; a < o; ++a) acc += gm[b * o + a] * wsq[a * ci + i];
          g[b * ci + i] += static_cast<float>(2.0 * acc * sn.value[b * ci + i]);
        }
    }
  });
}

// ---- dense and convolution -------------------------------------------------

// x [N,F], w [O,F], optional b [O] -> [N,O]
inline Var linear(const Var& x, const Var& w, const Var& b = Var()) {
  using namespace detail;
  const int n = x.dim(0), f = static_cast<int>(x.value().numel() / n), o = w.dim(0);
  if (w.dim(1) != f) throw InvalidArgument("linear: input width " + std::to_string(f) + " vs weight " + shape_str(w.shape()));
  Tensor out({n, o});
  MapMat(out.data(), n, o).noalias() = CMapMat(x.value().data(), n, f) * CMapMat(w.value().data(), o, f).transpose();
  const bool has_b = b.defined();
  if (has_b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < o; ++j) out[i * o + j] += b.value()[j];
  auto bw = [n, f, o, has_b](Node& self) {
    Node& xn = in(self, 0);
    Node& wn = in(self, 1);
    CMapMat g(self.grad.data(), n, o);
    if (xn.requires_grad) MapMat(xn.ensure_grad().data(), n, f).noalias() += g * CMapMat(wn.value.data(), o, f);
    if (wn.requires_grad) MapMat(wn.ensure_grad().data(), o, f).noalias() += g.transpose() * CMapMat(xn.value.data(), n, f);
    if (has_b && wants(self, 2)) {
      auto& gb = in(self, 2).ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) gb[j] += self.grad[i * o + j];
    }
  };
  return has_b ? make_result(std::move(out), {x, w, b}, bw) : make_result(std::move(out), {x, w}, bw);
}

// 2-D convolution, square kernel, zero padding. x [N,C,H,W], w [O,C,k,k].
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  using namespace detail;
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c) throw InvalidArgument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const int p = ho * wo, ckk = c * k * k, cols = n * p;
  auto col = std::make_shared<std::vector<float>>(static_cast<std::size_t>(ckk) * cols, 0.0f);
  const float* xv = x.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        float* row = col->data() + static_cast<std::size_t>((ch * k + ki) * k + kj) * cols;
        for (int a = 0; a < n; ++a) {
          const float* img = xv + (static_cast<std::size_t>(a) * c + ch) * h * wd;
          for (int oi = 0; oi < ho; ++oi) {
            const int ii = oi * stride - pad + ki;
            float* dst = row + a * p + oi * wo;
            if (ii < 0 || ii >= h) continue;
            for (int oj = 0; oj < wo; ++oj) {
              const int jj = oj * stride - pad + kj;
              if (jj >= 0 && jj < wd) dst[oj] = img[ii * wd + jj];
            }
          }
        }
      }
  RowMat tmp = CMapMat(w.value().data(), o, ckk) * CMapMat(col->data(), ckk, cols);
  Tensor out({n, o, ho, wo});
  for (int a = 0; a < n; ++a)
    for (int oc = 0; oc < o; ++oc) {
      const float bias = b.defined() ? b.value()[oc] : 0.0f;
      float* dst = out.data() + (static_cast<std::size_t>(a) * o + oc) * p;
      const float* src = tmp.data() + static_cast<std::size_t>(oc) * cols + a * p;
      for (int q = 0; q < p; ++q) dst[q] = src[q] + bias;
    }
  const bool has_b = b.defined();
  auto bw = [=](Node& self) {
    RowMat g(o, cols);
    for (int a = 0; a < n; ++a)
      for (int oc = 0; oc < o; ++oc) {
        const float* src = self.grad.data() + (static_cast<std::size_t>(a) * o + oc) * p;
        std::copy_n(src, p, g.data() + static_cast<std::size_t>(oc) * cols + a * p);
      }
    Node& xn = in(self, 0);
    Node& wn = in(self, 1);
    if (wn.requires_grad) MapMat(wn.ensure_grad().data(), o, ckk).noalias() += g * CMapMat(col->data(), ckk, cols).transpose();
    if (has_b && wants(self, 2)) {
      auto& gb = in(self, 2).ensure_grad();
      for (int oc = 0; oc < o; ++oc) gb[oc] += g.row(oc).sum();
    }
    if (xn.requires_grad) {
      RowMat dcol = CMapMat(wn.value.data(), o, ckk).transpose() * g;
      float* gx = xn.ensure_grad().data();
      for (int ch = 0; ch < c; ++ch)
        for (int ki = 0; ki < k; ++ki)
          for (int kj = 0; kj < k; ++kj) {
            const float* row = dcol.data() + static_cast<std::size_t>((ch * k + ki) * k + kj) * cols;
            for (int a = 0; a < n; ++a) {
              float* img = gx + (static_cast<std::size_t>(a) * c + ch) * h * wd;
              for (int oi = 0; oi < ho; ++oi) {
                const int ii = oi * stride - pad + ki;
                if (ii < 0 || ii >= h) continue;
                const float* src = row + a * p + oi * wo;
                for (int oj = 0; oj < wo; ++oj) {
                  const int jj = oj * stride - pad + kj;
                  if (jj >= 0 && jj < wd) img[ii * wd + jj] += src[oj];
                }
              }
            }
          }
    }
  };
  return has_b ? make_result(std::move(out), {x, w, b}, bw) : make_result(std::move(out), {x, w}, bw);
}

// ---- reductions and losses -------------------------------------------------

inline Var mean(const Var& x) {
  const std::size_t m = x.value().numel();
  double s = 0;
  for (float v : x.value().vec()) s += v;
  return make_result(Tensor::scalar(static_cast<float>(s / m)), {x}, [m](Node& self) {
    if (!detail::wants(self, 0)) return;
    auto& g = detail::in(self, 0).ensure_grad();
    const float gi = self.grad[0] / static_cast<float>(m);
    for (std::size_t i = 0; i < m; ++i) g[i] += gi;
  });
}

// Mean squared error over all elements.
inline Var mse(const Var& a, const Var& b) {
  detail::check_same(a, b, "mse");
  const std::size_t m = a.value().numel();
  double s = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    s += d * d;
  }
  return make_result(Tensor::scalar(static_cast<float>(s / m)), {a, b}, [m](Node& self) {
    Node& an = detail::in(self, 0);
    Node& bn = detail::in(self, 1);
    const float k = 2.0f * self.grad[0] / static_cast<float>(m);
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) g[i] += k * (an.value[i] - bn.value[i]);
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) g[i] -= k * (an.value[i] - bn.value[i]);
    }
  });
}

// mean(softplus(sign * x)). With sign = -1 this is mean(-log sigmoid(x)),
// with sign = +1 it is mean(-log(1 - sigmoid(x))).
inline Var softplus_mean(const Var& x, float sign) {
  const std::size_t m = x.value().numel();
  double s = 0;
  for (float v : x.value().vec()) {
    const double z = sign * v;
    s += z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  }
  return make_result(Tensor::scalar(static_cast<float>(s / m)), {x}, [m, sign](Node& self) {
    if (!detail::wants(self, 0)) return;
    Node& xn = detail::in(self, 0);
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const float z = sign * xn.value[i];
      const float sg = 1.0f / (1.0f + std::exp(-z));
      g[i] += self.grad[0] * sign * sg / static_cast<float>(m);
    }
  });
}

namespace detail {

// Row-wise softmax in double precision.
inline std::vector<double> softmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<double> p(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    double mx = logits[i * k];
    for (int j = 1; j < k; ++j) mx = std::max<double>(mx, logits[i * k + j]);
    double z = 0;
    for (int j = 0; j < k; ++j) z += (p[i * k + j] = std::exp(logits[i * k + j] - mx));
    for (int j = 0; j < k; ++j) p[i * k + j] /= z;
  }
  return p;
}

inline void check_targets(const Var& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw InvalidArgument("loss expects [N,K] logits");
  if (static_cast<int>(targets.size()) != logits.dim(0)) throw InvalidArgument("loss: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= logits.dim(1)) throw InvalidArgument("loss: target " + std::to_string(t) + " outside [0,K)");
}

}  // namespace detail

inline constexpr double kProbEps = 1e-12;

// Mean categorical cross-entropy over the batch.
inline Var cross_entropy(const Var& logits, std::vector<int> targets) {
  detail::check_targets(logits, targets);
  const int n = logits.dim(0), k = logits.dim(1);
  auto p = detail::softmax_rows(logits.value());
  double s = 0;
  for (int i = 0; i < n; ++i) s -= std::log(std::max(p[i * k + targets[i]], kProbEps));
  return make_result(Tensor::scalar(static_cast<float>(s / n)), {logits},
                     [n, k, p = std::move(p), targets = std::move(targets)](Node& self) {
                       if (!detail::wants(self, 0)) return;
                       auto& g = detail::in(self, 0).ensure_grad();
                       const double scale = self.grad[0] / static_cast<double>(n);
                       for (int i = 0; i < n; ++i)
                         for (int j = 0; j < k; ++j)
                           g[i * k + j] += static_cast<float>(scale * (p[i * k + j] - (j == targets[i] ? 1.0 : 0.0)));
                     });
}

// Mean generalized cross-entropy (1 - p_y^q) / q. The backward pass is the
// chain rule through p_y: dL/dp_y = -p_y^(q-1), dp_y/dz_j = p_y (delta_jy - p_j).
inline Var generalized_cross_entropy(const Var& logits, std::vector<int> targets, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw InvalidArgument("GCE q must lie in (0,1], got " + std::to_string(q));
  detail::check_targets(logits, targets);
  const int n = logits.dim(0), k = logits.dim(1);
  auto p = detail::softmax_rows(logits.value());
  double s = 0;
  for (int i = 0; i < n; ++i) s += (1.0 - std::pow(std::max(p[i * k + targets[i]], kProbEps), q)) / q;
  return make_result(Tensor::scalar(static_cast<float>(s / n)), {logits},
                     [n, k, q, p = std::move(p), targets = std::move(targets)](Node& self) {
                       if (!detail::wants(self, 0)) return;
                       auto& g = detail::in(self, 0).ensure_grad();
                       const double scale = self.grad[0] / static_cast<double>(n);
                       for (int i = 0; i < n; ++i) {
                         const double py = std::max(p[i * k + targets[i]], kProbEps);
                         const double dl_dpy = -std::pow(py, q - 1.0);
                         for (int j = 0; j < k; ++j) {
                           const double dpy_dz = py * ((j == targets[i] ? 1.0 : 0.0) - p[i * k + j]);
                           g[i * k + j] += static_cast<float>(scale * dl_dpy * dpy_dz);
                         }
                       }
                     });
}

}  // namespace biaswap::ag
