#pragma once

#include <cstddef>
#include <vector>

#include "lffs/tensor.hpp"

namespace lffs {

// Every op below records itself on the graph and has a gradient. Shape
// mismatches raise ShapeError naming the op.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[B×F] · weightᵀ[F×O] + bias[O]. Bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x[B×C×H×W] with weight[O×C×k×k], zero padding. Bias may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options = {});

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// Non-overlapping max pooling; H and W must be divisible by the window.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window = 2);

enum class BatchNormMode {
  train,   // batch statistics, running statistics updated
  eval,    // running statistics, affine parameters trainable
  frozen,  // running statistics and affine parameters both fixed
};

template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, BatchNormMode mode);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Collapses all but the leading dimension.
template <typename T>
Tensor<T> flatten(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
/// Euclidean norm over all entries.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x);
template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b);

/// Row-wise over the last dimension of a [B×C] tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x);

/// Each row divided by max(‖row‖, eps).
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps);

}  // namespace lffs
