#pragma once

// Test-only helpers: random tensors and a central finite-difference oracle
// that only ever evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "lvctc/tensor.hpp"

namespace lvctc::testing {

inline Tensor random_tensor(const Shape &shape, std::mt19937_64 &rng,
                            bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double &x : v) x = normal(rng);
  return Tensor::from(shape, std::move(v), requires_grad);
}

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Largest relative error between autodiff gradients and central differences
// of `loss` over every element of every input. The floor grows with |loss|
// since the roundoff in a central difference is about eps·|loss|/h.
inline double gradcheck_max_error(std::vector<Tensor> inputs,
                                  const std::function<Tensor()> &loss,
                                  double h = 1e-5) {
  for (auto &t : inputs) t.zero_grad();
  Tensor base = loss();
  base.backward();
  const double floor = 1e-6 * std::max(1.0, std::abs(base.item()));
  std::vector<std::vector<double>> analytic;
  for (auto &t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss().item();
      data[i] = orig - h;
      const double down = loss().item();
      data[i] = orig;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2 * h), floor));
    }
  }
  return worst;
}

// Random log-distribution rows [T, width].
inline Tensor random_log_probs(std::size_t frames, std::size_t width,
                               std::mt19937_64 &rng, bool requires_grad = false) {
  std::normal_distribution<double> normal(0.0, 1.5);
  std::vector<double> v(frames * width);
  for (std::size_t t = 0; t < frames; ++t) {
    double m = -1e300;
    for (std::size_t k = 0; k < width; ++k) m = std::max(m, v[t * width + k] = normal(rng));
    double acc = 0.0;
    for (std::size_t k = 0; k < width; ++k) acc += std::exp(v[t * width + k] - m);
    const double lse = m + std::log(acc);
    for (std::size_t k = 0; k < width; ++k) v[t * width + k] -= lse;
  }
  return Tensor::from({frames, width}, std::move(v), requires_grad);
}

}  // namespace lvctc::testing
