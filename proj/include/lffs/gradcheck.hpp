#pragma once

#include <functional>

#include "lffs/tensor.hpp"

namespace lffs {

/// Central-difference gradient oracle. `input` must be a leaf that `loss`
/// reads; its values are perturbed in place and restored. Returns the max
/// over coordinates of |g_a - g_n| / max(1, |g_a|, |g_n|).
template <typename T>
double finite_diff_check(const std::function<Tensor<T>()>& loss, Tensor<T> input, T step);

/// Convenience form for a function of a single tensor.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& x, T step);

}  // namespace lffs
