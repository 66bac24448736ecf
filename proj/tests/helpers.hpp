#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "lffs/ops.hpp"
#include "lffs/random.hpp"
#include "lffs/tensor.hpp"

namespace lffs::test {

inline std::vector<double> uniform(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor<double>::from(std::move(shape), uniform(n, rng, lo, hi), true);
}

// Reduces any output to a scalar through fixed random weights, so every
// output coordinate contributes to the checked gradient.
inline Tensor<double> project(const Tensor<double>& y, const std::vector<double>& weights) {
  return sum(mul(y, Tensor<double>::from(y.shape(), weights)));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace lffs::test
