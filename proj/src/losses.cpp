#include "lffs/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lffs {

namespace {

void require_logits(const char* op, const Shape& shape) {
  if (shape.size() != 2) throw ShapeError(op, "expected [B x C] logits, got " + shape_str(shape));
  if (shape[1] < 2) throw ShapeError(op, "needs at least two classes, got " + shape_str(shape));
  if (shape[0] == 0) throw ShapeError(op, "empty batch");
}

template <typename T>
std::vector<T> log_probs(std::span<const T> x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * cols;
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) peak = std::max(peak, in[c]);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - peak);
    const T lse = peak + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_logits("cross_entropy", logits.shape());
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy", logits.shape(), Shape{labels.size()});
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(cols) + ")");
    }
  }
  auto lp = log_probs<T>(logits.data(), rows, cols);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) loss -= lp[r * cols + labels[r]];
  loss /= T(rows);
  std::vector<int> targets(labels.begin(), labels.end());
  return detail::make_result<T>(
      {}, {loss}, {logits}, [logits, lp = std::move(lp), targets = std::move(targets), rows, cols](const std::vector<T>& g) {
        std::vector<T> gx(rows * cols);
        const T k = g[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            gx[r * cols + c] = k * (std::exp(lp[r * cols + c]) - (static_cast<int>(c) == targets[r] ? T(1) : T(0)));
        logits.node()->accumulate(std::move(gx));
      });
}

template <typename T>
Tensor<T> entropy_loss(const Tensor<T>& logits) {
  require_logits("entropy_loss", logits.shape());
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto lp = log_probs<T>(logits.data(), rows, cols);
  std::vector<T> row_h(rows, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) row_h[r] -= std::exp(lp[r * cols + c]) * lp[r * cols + c];
    total += row_h[r];
  }
  return detail::make_result<T>(
      {}, {total / T(rows)}, {logits},
      [logits, lp = std::move(lp), row_h = std::move(row_h), rows, cols](const std::vector<T>& g) {
        // dH/dz_j = -p_j (log p_j + H)
        std::vector<T> gx(rows * cols);
        const T k = g[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const T l = lp[r * cols + c];
            gx[r * cols + c] = -k * std::exp(l) * (l + row_h[r]);
          }
        logits.node()->accumulate(std::move(gx));
      });
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  if (a.shape() != b.shape()) throw ShapeError("cosine_similarity", a.shape(), b.shape());
  if (a.rank() != 2 || a.dim(0) == 0) {
    throw ShapeError("cosine_similarity", "expected non-empty [B x C], got " + shape_str(a.shape()));
  }
  if (!(eps > T(0))) throw std::invalid_argument("cosine_similarity: eps must be positive");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> na(rows), nb(rows), cos(rows);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T aa = 0, bb = 0, ab = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const T x = a.data()[r * cols + c], y = b.data()[r * cols + c];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    cos[r] = ab / (std::max(na[r], eps) * std::max(nb[r], eps));
    total += cos[r];
  }
  return detail::make_result<T>(
      {}, {total / T(rows)}, {a, b},
      [a, b, na = std::move(na), nb = std::move(nb), cos = std::move(cos), eps, rows, cols](const std::vector<T>& g) {
        const T k = g[0] / T(rows);
        // d cos / d a = b/(Na Nb) - cos·a/na² when na > eps, else b/(eps Nb).
        auto side = [&](const Tensor<T>& self, const Tensor<T>& other, const std::vector<T>& ns,
                        const std::vector<T>& no) {
          if (!self.requires_grad()) return;
          std::vector<T> gs(rows * cols);
          for (std::size_t r = 0; r < rows; ++r) {
            const T ds = std::max(ns[r], eps), dn = std::max(no[r], eps);
            const bool active = ns[r] > eps;
            for (std::size_t c = 0; c < cols; ++c) {
              T v = other.data()[r * cols + c] / (ds * dn);
              if (active) v -= cos[r] * self.data()[r * cols + c] / (ns[r] * ns[r]);
              gs[r * cols + c] = k * v;
            }
          }
          self.node()->accumulate(gs);
        };
        side(a, b, na, nb);
        side(b, a, nb, na);
      });
}

template <typename T>
Tensor<T> kl_div_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("kl_div_loss", student_logits.shape(), teacher_logits.shape());
  }
  require_logits("kl_div_loss", student_logits.shape());
  const std::size_t rows = student_logits.dim(0), cols = student_logits.dim(1);
  auto ls = log_probs<T>(student_logits.data(), rows, cols);
  auto lt = log_probs<T>(teacher_logits.data(), rows, cols);
  std::vector<T> row_kl(rows, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      row_kl[r] += std::exp(lt[i]) * (lt[i] - ls[i]);
    }
    total += row_kl[r];
  }
  return detail::make_result<T>(
      {}, {total / T(rows)}, {student_logits, teacher_logits},
      [student_logits, teacher_logits, ls = std::move(ls), lt = std::move(lt), row_kl = std::move(row_kl), rows,
       cols](const std::vector<T>& g) {
        const T k = g[0] / T(rows);
        if (student_logits.requires_grad()) {
          std::vector<T> gs(rows * cols);
          for (std::size_t i = 0; i < gs.size(); ++i) gs[i] = k * (std::exp(ls[i]) - std::exp(lt[i]));
          student_logits.node()->accumulate(gs);
        }
        if (teacher_logits.requires_grad()) {
          std::vector<T> gt(rows * cols);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
              const std::size_t i = r * cols + c;
              gt[i] = k * std::exp(lt[i]) * (lt[i] - ls[i] - row_kl[r]);
            }
          teacher_logits.node()->accumulate(gt);
        }
      });
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows", "expected [B x C], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.data().data() + r * cols;
    out[r] = static_cast<int>(std::max_element(row, row + cols) - row);
  }
  return out;
}

#define LFFS_INSTANTIATE_LOSSES(T)                                            \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);  \
  template Tensor<T> entropy_loss(const Tensor<T>&);                         \
  template Tensor<T> cosine_similarity(const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> kl_div_loss(const Tensor<T>&, const Tensor<T>&);        \
  template std::vector<int> argmax_rows(const Tensor<T>&);

LFFS_INSTANTIATE_LOSSES(float)
LFFS_INSTANTIATE_LOSSES(double)

}  // namespace lffs
