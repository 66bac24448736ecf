#include "lffs/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace lffs {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MutArr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const char* op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(shape));
  }
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

// col[(c,ki,kj), (b,oh,ow)]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t cols = g.batch * g.positions();
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        const long shift = static_cast<long>(kj) - static_cast<long>(g.padding);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* plane = x + (b * g.channels + c) * g.height * g.width;
          T* dst = row + b * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            T* out = dst + oh * g.out_w;
            const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
            if (ih < 0 || ih >= H) {
              std::fill_n(out, g.out_w, T(0));
              continue;
            }
            const T* src = plane + ih * W;
            if (g.stride == 1) {
              const long lo = std::clamp<long>(-shift, 0, static_cast<long>(g.out_w));
              const long hi = std::clamp<long>(W - shift, lo, static_cast<long>(g.out_w));
              std::fill(out, out + lo, T(0));
              std::copy(src + lo + shift, src + hi + shift, out + lo);
              std::fill(out + hi, out + g.out_w, T(0));
            } else {
              for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                const long iw = static_cast<long>(ow * g.stride) + shift;
                out[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
  const std::size_t cols = g.batch * g.positions();
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        const long shift = static_cast<long>(kj) - static_cast<long>(g.padding);
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* plane = x + (b * g.channels + c) * g.height * g.width;
          const T* src = row + b * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
            if (ih < 0 || ih >= H) continue;
            const T* in = src + oh * g.out_w;
            T* dst = plane + ih * W;
            if (g.stride == 1) {
              const long lo = std::clamp<long>(-shift, 0, static_cast<long>(g.out_w));
              const long hi = std::clamp<long>(W - shift, lo, static_cast<long>(g.out_w));
              for (long ow = lo; ow < hi; ++ow) dst[ow + shift] += in[ow];
            } else {
              for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                const long iw = static_cast<long>(ow * g.stride) + shift;
                if (iw >= 0 && iw < W) dst[iw] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() =
      ConstMapMat<T>(a.data().data(), m, k) * ConstMapMat<T>(b.data().data(), k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [a, b, m, k, n](const std::vector<T>& g) {
    ConstMapMat<T> gm(g.data(), m, n);
    if (a.requires_grad()) {
      std::vector<T> ga(m * k);
      MapMat<T>(ga.data(), m, k).noalias() = gm * ConstMapMat<T>(b.data().data(), k, n).transpose();
      a.node()->accumulate(ga);
    }
    if (b.requires_grad()) {
      std::vector<T> gb(k * n);
      MapMat<T>(gb.data(), k, n).noalias() = ConstMapMat<T>(a.data().data(), m, k).transpose() * gm;
      b.node()->accumulate(gb);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", x.shape(), 2);
  require_rank("linear", weight.shape(), 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) throw ShapeError("linear", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{out_f}) throw ShapeError("linear", weight.shape(), bias.shape());

  std::vector<T> out(batch * out_f);
  MapMat<T> y(out.data(), batch, out_f);
  y.noalias() = ConstMapMat<T>(x.data().data(), batch, in) *
                ConstMapMat<T>(weight.data().data(), out_f, in).transpose();
  if (bias.defined()) {
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t j = 0; j < out_f; ++j) y(i, j) += bias.data()[j];
  }
  return detail::make_result<T>(
      {batch, out_f}, std::move(out), {x, weight, bias},
      [x, weight, bias, batch, in, out_f](const std::vector<T>& g) {
        ConstMapMat<T> gm(g.data(), batch, out_f);
        if (x.requires_grad()) {
          std::vector<T> gx(batch * in);
          MapMat<T>(gx.data(), batch, in).noalias() = gm * ConstMapMat<T>(weight.data().data(), out_f, in);
          x.node()->accumulate(std::move(gx));
        }
        if (weight.requires_grad()) {
          std::vector<T> gw(out_f * in);
          MapMat<T>(gw.data(), out_f, in).noalias() =
              gm.transpose() * ConstMapMat<T>(x.data().data(), batch, in);
          weight.node()->accumulate(gw);
        }
        if (bias.defined() && bias.requires_grad()) {
          std::vector<T> gb(out_f, T(0));
          for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < out_f; ++j) gb[j] += gm(i, j);
          bias.node()->accumulate(gb);
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions options) {
  require_rank("conv2d", x.shape(), 4);
  require_rank("conv2d", weight.shape(), 4);
  if (weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d", x.shape(), weight.shape());
  }
  if (options.stride == 0) throw ShapeError("conv2d", "stride must be positive");
  ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                   options.stride, options.padding, 0, 0};
  if (geo.height + 2 * geo.padding < geo.kernel || geo.width + 2 * geo.padding < geo.kernel) {
    throw ShapeError("conv2d", x.shape(), weight.shape());
  }
  geo.out_h = (geo.height + 2 * geo.padding - geo.kernel) / geo.stride + 1;
  geo.out_w = (geo.width + 2 * geo.padding - geo.kernel) / geo.stride + 1;
  if (bias.defined() && bias.shape() != Shape{geo.out_channels}) {
    throw ShapeError("conv2d", weight.shape(), bias.shape());
  }

  const std::size_t cols = geo.batch * geo.positions();
  const auto P = static_cast<Eigen::Index>(geo.positions());
  const auto O = static_cast<Eigen::Index>(geo.out_channels);
  const auto K = static_cast<Eigen::Index>(geo.patch());
  std::vector<T> col(geo.patch() * cols);
  im2col(geo, x.data().data(), col.data());
  std::vector<T> out(geo.batch * geo.out_channels * geo.positions());
  {
    ConstMapMat<T> wm(weight.data().data(), O, K);
    for (std::size_t b = 0; b < geo.batch; ++b) {
      MapMat<T> dst(out.data() + b * geo.out_channels * geo.positions(), O, P);
      dst.noalias() = wm * ConstStrided<T>(col.data() + b * geo.positions(), K, P, Eigen::OuterStride<>(cols));
      if (bias.defined()) dst.colwise() += ConstMapMat<T>(bias.data().data(), O, 1).col(0);
    }
  }

  return detail::make_result<T>(
      {geo.batch, geo.out_channels, geo.out_h, geo.out_w}, std::move(out), {x, weight, bias},
      [x, weight, bias, geo, cols, P, O, K](const std::vector<T>& g) {
        auto g_of = [&](std::size_t b) {
          return ConstMapMat<T>(g.data() + b * geo.out_channels * geo.positions(), O, P);
        };
        if (weight.requires_grad()) {
          std::vector<T> col(geo.patch() * cols);
          im2col(geo, x.data().data(), col.data());
          RowMat<T> gw = RowMat<T>::Zero(O, K);
          for (std::size_t b = 0; b < geo.batch; ++b) {
            gw.noalias() +=
                g_of(b) * ConstStrided<T>(col.data() + b * geo.positions(), K, P, Eigen::OuterStride<>(cols)).transpose();
          }
          weight.node()->accumulate(std::span<const T>(gw.data(), weight.numel()));
        }
        if (bias.defined() && bias.requires_grad()) {
          std::vector<T> gb(geo.out_channels, T(0));
          for (std::size_t b = 0; b < geo.batch; ++b)
            for (Eigen::Index o = 0; o < O; ++o) gb[o] += g_of(b).row(o).sum();
          bias.node()->accumulate(gb);
        }
        if (x.requires_grad()) {
          std::vector<T> gcol(geo.patch() * cols);
          ConstMapMat<T> wm(weight.data().data(), O, K);
          for (std::size_t b = 0; b < geo.batch; ++b) {
            Strided<T>(gcol.data() + b * geo.positions(), K, P, Eigen::OuterStride<>(cols)).noalias() =
                wm.transpose() * g_of(b);
          }
          std::vector<T> gx(x.numel(), T(0));
          col2im(geo, gcol.data(), gx.data());
          x.node()->accumulate(std::move(gx));
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x](const std::vector<T>& g) {
    std::vector<T> gx(g.size());
    auto in = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = in[i] > T(0) ? g[i] : T(0);
    x.node()->accumulate(std::move(gx));
  });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window) {
  require_rank("max_pool2d", x.shape(), 4);
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || h % window || w % window) {
    throw ShapeError("max_pool2d", "spatial size " + shape_str(x.shape()) + " not divisible by window " +
                                       std::to_string(window));
  }
  const std::size_t oh = h / window, ow = w / window;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = p * h * w + (i * window) * w + j * window;
        for (std::size_t di = 0; di < window; ++di)
          for (std::size_t dj = 0; dj < window; ++dj) {
            std::size_t idx = p * h * w + (i * window + di) * w + (j * window + dj);
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return detail::make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                                [x, argmax = std::move(argmax)](const std::vector<T>& g) {
                                  std::vector<T> gx(x.numel(), T(0));
                                  for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                                  x.node()->accumulate(std::move(gx));
                                });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, BatchNormMode mode) {
  require_rank("batchnorm2d", x.shape(), 4);
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{channels}) throw ShapeError("batchnorm2d", x.shape(), gamma.shape());
  if (beta.shape() != Shape{channels}) throw ShapeError("batchnorm2d", x.shape(), beta.shape());
  if (stats.running_mean.size() != channels || stats.running_var.size() != channels) {
    throw ShapeError("batchnorm2d", "running statistics do not match " + std::to_string(channels) + " channels");
  }
  const std::size_t count = batch * plane;
  if (mode == BatchNormMode::train && count < 2) {
    throw ShapeError("batchnorm2d", "training mode needs more than one value per channel");
  }
  const T* xd = x.data().data();
  auto plane_of = [&](const T* base, std::size_t b, std::size_t c) {
    return ConstArr<T>(base + (b * channels + c) * plane, static_cast<Eigen::Index>(plane));
  };

  std::vector<T> mean(channels), invstd(channels);
  if (mode == BatchNormMode::train) {
    for (std::size_t c = 0; c < channels; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b) s += plane_of(xd, b, c).sum();
      const T m = s / T(count);
      T v = 0;
      for (std::size_t b = 0; b < batch; ++b) v += (plane_of(xd, b, c) - m).square().sum();
      mean[c] = m;
      invstd[c] = T(1) / std::sqrt(v / T(count) + stats.eps);
      stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * m;
      stats.running_var[c] =
          (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * (v / T(count - 1));
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.running_mean[c];
      invstd[c] = T(1) / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      MutArr<T> h(xhat.data() + base, static_cast<Eigen::Index>(plane));
      h = (plane_of(xd, b, c) - mean[c]) * invstd[c];
      MutArr<T>(out.data() + base, static_cast<Eigen::Index>(plane)) = gd[c] * h + bd[c];
    }
  }

  std::vector<Tensor<T>> inputs{x};
  if (mode != BatchNormMode::frozen) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  const bool affine_trainable = mode != BatchNormMode::frozen;
  const bool batch_stats = mode == BatchNormMode::train;
  return detail::make_result<T>(
      x.shape(), std::move(out), std::move(inputs),
      [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), batch, channels, plane, count,
       affine_trainable, batch_stats](const std::vector<T>& g) {
        const auto n_plane = static_cast<Eigen::Index>(plane);
        auto at = [&](const T* base, std::size_t b, std::size_t c) {
          return ConstArr<T>(base + (b * channels + c) * plane, n_plane);
        };
        // Per-channel sums of g and g·xhat feed both the affine and the input gradient.
        std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            sum_g[c] += at(g.data(), b, c).sum();
            sum_gx[c] += (at(g.data(), b, c) * at(xhat.data(), b, c)).sum();
          }
        if (affine_trainable && (gamma.requires_grad() || beta.requires_grad())) {
          gamma.node()->accumulate(sum_gx);
          beta.node()->accumulate(sum_g);
        }
        if (!x.requires_grad()) return;
        const T* gd = gamma.data().data();
        std::vector<T> gx(x.numel());
        const T n = T(count);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c) {
            MutArr<T> dst(gx.data() + (b * channels + c) * plane, n_plane);
            const T k = gd[c] * invstd[c];
            if (!batch_stats) {
              dst = at(g.data(), b, c) * k;
            } else {
              dst = (k / n) * (n * at(g.data(), b, c) - sum_g[c] - at(xhat.data(), b, c) * sum_gx[c]);
            }
          }
        x.node()->accumulate(std::move(gx));
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  return detail::make_result<T>(std::move(shape), x.values(), {x},
                                [x](const std::vector<T>& g) { x.node()->accumulate(g); });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("flatten", "needs a leading batch dimension");
  return reshape(x, Shape{x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("add", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    a.node()->accumulate(g);
    b.node()->accumulate(g);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("sub", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    a.node()->accumulate(g);
    if (b.requires_grad()) {
      std::vector<T> neg(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      b.node()->accumulate(neg);
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("mul", a, b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<T>& g) {
    std::vector<T> ga(g.size());
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b.data()[i];
      a.node()->accumulate(ga);
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * a.data()[i];
      b.node()->accumulate(ga);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [x, factor](const std::vector<T>& g) {
    std::vector<T> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
    x.node()->accumulate(std::move(gx));
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto d = x.data();
  const T s = ConstArr<T>(d.data(), static_cast<Eigen::Index>(d.size())).sum();
  return detail::make_result<T>({}, {s}, {x}, [x](const std::vector<T>& g) {
    x.node()->accumulate(std::vector<T>(x.numel(), g[0]));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  const auto d = x.data();
  const T n = std::sqrt(ConstArr<T>(d.data(), static_cast<Eigen::Index>(d.size())).square().sum());
  return detail::make_result<T>({}, {n}, {x}, [x, n](const std::vector<T>& g) {
    std::vector<T> gx(x.numel(), T(0));
    if (n > T(0))
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[0] * x.data()[i] / n;
    x.node()->accumulate(std::move(gx));
  });
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("dot", a, b);
  T s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return detail::make_result<T>({}, {s}, {a, b}, [a, b](const std::vector<T>& g) {
    std::vector<T> grad(a.numel());
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = g[0] * b.data()[i];
      a.node()->accumulate(grad);
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = g[0] * a.data()[i];
      b.node()->accumulate(grad);
    }
  });
}

namespace {

template <typename T>
std::vector<T> row_log_softmax(std::span<const T> x, std::size_t rows, std::size_t cols) {
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
Tensor<T> log_softmax(const Tensor<T>& x) {
  require_rank("log_softmax", x.shape(), 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto out = row_log_softmax<T>(x.data(), rows, cols);
  std::vector<T> probs(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) probs[i] = std::exp(out[i]);
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [x, probs = std::move(probs), rows, cols](const std::vector<T>& g) {
                                  std::vector<T> gx(g.size());
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    T total = 0;
                                    for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
                                    for (std::size_t c = 0; c < cols; ++c)
                                      gx[r * cols + c] = g[r * cols + c] - probs[r * cols + c] * total;
                                  }
                                  x.node()->accumulate(std::move(gx));
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require_rank("softmax", x.shape(), 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto out = row_log_softmax<T>(x.data(), rows, cols);
  for (auto& v : out) v = std::exp(v);
  auto probs = out;
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [x, probs = std::move(probs), rows, cols](const std::vector<T>& g) {
                                  std::vector<T> gx(g.size());
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    T inner = 0;
                                    for (std::size_t c = 0; c < cols; ++c)
                                      inner += g[r * cols + c] * probs[r * cols + c];
                                    for (std::size_t c = 0; c < cols; ++c)
                                      gx[r * cols + c] = probs[r * cols + c] * (g[r * cols + c] - inner);
                                  }
                                  x.node()->accumulate(std::move(gx));
                                });
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps) {
  require_rank("normalize_rows", x.shape(), 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += x.data()[r * cols + c] * x.data()[r * cols + c];
    norms[r] = std::sqrt(s);
    const T d = std::max(norms[r], eps);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.data()[r * cols + c] / d;
  }
  auto unit = out;
  return detail::make_result<T>(
      x.shape(), std::move(out), {x},
      [x, unit = std::move(unit), norms = std::move(norms), eps, rows, cols](const std::vector<T>& g) {
        std::vector<T> gx(g.size());
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] > eps) {
            T proj = 0;
            for (std::size_t c = 0; c < cols; ++c) proj += unit[r * cols + c] * g[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
              gx[r * cols + c] = (g[r * cols + c] - unit[r * cols + c] * proj) / norms[r];
          } else {
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] = g[r * cols + c] / eps;
          }
        }
        x.node()->accumulate(std::move(gx));
      });
}

#define LFFS_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions); \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                 BatchNormStats<T>&, BatchNormMode);                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> flatten(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> l2_norm(const Tensor<T>&);                                                  \
  template Tensor<T> dot(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> softmax(const Tensor<T>&);                                                  \
  template Tensor<T> log_softmax(const Tensor<T>&);                                              \
  template Tensor<T> normalize_rows(const Tensor<T>&, T);

LFFS_INSTANTIATE_OPS(float)
LFFS_INSTANTIATE_OPS(double)

}  // namespace lffs
