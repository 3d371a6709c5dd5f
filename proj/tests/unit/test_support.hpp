#pragma once

#include <gtest/gtest.h>

#include <unsupported/Eigen/SpecialFunctions>

#include <functional>
#include <random>

#include "biaswap/autograd.hpp"

namespace biaswap::testing {

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, float scale = 1.0f) {
  Tensor t(std::move(s));
  std::normal_distribution<float> d(0.0f, scale);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

// Central finite differences against reverse-mode gradients for every entry of
// every input. Returns the largest |numeric - analytic| / (1 + |analytic|).
inline double fd_max_error(std::vector<ag::Var> inputs, const std::function<ag::Var()>& loss, float h = 1e-2f) {
  for (auto& v : inputs) v.zero_grad();
  ag::backward(loss());
  std::vector<Tensor> analytic;
  for (auto& v : inputs) analytic.push_back(v.grad());
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& x = inputs[i].mutable_value();
    for (std::size_t j = 0; j < x.numel(); ++j) {
      const float orig = x[j];
      x[j] = orig + h;
      const double up = loss().item();
      x[j] = orig - h;
      const double down = loss().item();
      x[j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(numeric - analytic[i][j]) / (1.0 + std::abs(analytic[i][j])));
    }
  }
  return worst;
}

// Scalar projection <out, r> / numel(out), smooth in every output entry.
inline ag::Var project(const ag::Var& out, const Tensor& r) { return ag::mean(ag::mul(out, ag::Var(r))); }

// Pearson chi-square goodness of fit; returns the upper-tail p-value.
inline double chi_square_pvalue(const std::vector<long>& observed, const std::vector<double>& probabilities) {
  long n = 0;
  for (long o : observed) n += o;
  double chi2 = 0;
  int df = -1;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (probabilities[i] <= 0) continue;
    const double e = n * probabilities[i];
    chi2 += (observed[i] - e) * (observed[i] - e) / e;
    ++df;
  }
  return Eigen::numext::igammac(df / 2.0, chi2 / 2.0);
}

}  // namespace biaswap::testing
