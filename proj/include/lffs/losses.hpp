#pragma once

#include <span>

#include "lffs/tensor.hpp"

namespace lffs {

/// Mean over the batch of -log softmax(logits)[label]. Needs C >= 2 and every
/// label in [0, C); throws std::invalid_argument otherwise.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Mean Shannon entropy (natural log) of the row softmax.
template <typename T>
Tensor<T> entropy_loss(const Tensor<T>& logits);

/// Mean over rows of aᵀb / (max(‖a‖,eps)·max(‖b‖,eps)). Pass a detached
/// tensor to stop gradients on one side.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8));

/// Mean over rows of KL(softmax(teacher) ‖ softmax(student)).
template <typename T>
Tensor<T> kl_div_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits);

/// Row-wise argmax of a [B×C] tensor.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

}  // namespace lffs
