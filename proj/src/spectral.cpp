#include "lffs/spectral.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace lffs {

namespace {

using cplx = std::complex<double>;

bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

void require_side(const char* op, std::size_t side) {
  if (side < 2) throw ShapeError(op, "side must be at least 2, got " + std::to_string(side));
  if (side % 2) throw ShapeError(op, "side must be even, got " + std::to_string(side));
}

/// Radix-2 plan for one transform length: bit-reversal table and twiddles.
struct FftPlan {
  std::size_t n = 0;
  std::vector<std::size_t> reversed;
  std::vector<cplx> twiddles;  // exp(-2πik/n), k < n/2

  explicit FftPlan(std::size_t size) : n(size), reversed(size), twiddles(size / 2) {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1) << (bits - 1 - b);
      reversed[i] = r;
    }
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      twiddles[k] = cplx(std::cos(angle), std::sin(angle));
    }
  }

  // Unnormalized in both directions; data is strided.
  void run(cplx* data, std::size_t stride, bool inverse) const {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = reversed[i];
      if (i < j) std::swap(data[i * stride], data[j * stride]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t half = len / 2, step = n / len;
      for (std::size_t start = 0; start < n; start += len) {
        for (std::size_t k = 0; k < half; ++k) {
          cplx w = twiddles[k * step];
          if (inverse) w = std::conj(w);
          cplx& a = data[(start + k) * stride];
          cplx& b = data[(start + k + half) * stride];
          const cplx t = w * b;
          b = a - t;
          a += t;
        }
      }
    }
  }
};

const FftPlan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, FftPlan> plans;
  auto it = plans.find(n);
  if (it == plans.end()) it = plans.emplace(n, FftPlan(n)).first;
  return it->second;
}

void fft2d_inplace(cplx* plane, std::size_t side, bool inverse) {
  const auto& plan = plan_for(side);
  for (std::size_t r = 0; r < side; ++r) plan.run(plane + r * side, 1, inverse);
  for (std::size_t c = 0; c < side; ++c) plan.run(plane + c, side, inverse);
}

void dft2d_direct(cplx* plane, std::size_t side, bool inverse) {
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<cplx> roots(side);
  for (std::size_t k = 0; k < side; ++k) {
    const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(side);
    roots[k] = cplx(std::cos(angle), std::sin(angle));
  }
  std::vector<cplx> out(side * side);
  for (std::size_t u = 0; u < side; ++u)
    for (std::size_t v = 0; v < side; ++v) {
      cplx acc = 0;
      for (std::size_t x = 0; x < side; ++x)
        for (std::size_t y = 0; y < side; ++y) acc += plane[x * side + y] * roots[(u * x + v * y) % side];
      out[u * side + v] = acc;
    }
  std::copy(out.begin(), out.end(), plane);
}

void transform(cplx* plane, std::size_t side, bool inverse, TransformPath path) {
  const bool fast = path == TransformPath::fft || (path == TransformPath::automatic && is_power_of_two(side));
  if (fast) {
    if (!is_power_of_two(side)) throw ShapeError("dft2d", "fft path needs a power-of-two side");
    fft2d_inplace(plane, side, inverse);
  } else {
    dft2d_direct(plane, side, inverse);
  }
}

// Centered index p holds frequency p - side/2, stored unshifted at
// (p + side/2) mod side. For even sides the shift is its own inverse.
std::size_t shifted(std::size_t i, std::size_t side) { return (i + side / 2) % side; }

}  // namespace

FrequencyMask radial_mask(std::size_t side, std::size_t radius, MaskKind kind) {
  require_side("radial_mask", side);
  FrequencyMask mask{side, radius, kind, std::vector<std::uint8_t>(side * side)};
  const double center = static_cast<double>(side / 2);
  const double r = static_cast<double>(radius);
  for (std::size_t p = 0; p < side; ++p)
    for (std::size_t q = 0; q < side; ++q) {
      const double dp = static_cast<double>(p) - center, dq = static_cast<double>(q) - center;
      const bool inside = std::sqrt(dp * dp + dq * dq) < r;
      mask.bits[p * side + q] = (kind == MaskKind::low) == inside ? 1 : 0;
    }
  return mask;
}

std::size_t full_pass_radius(std::size_t side) {
  const double half = static_cast<double>(side / 2);
  return static_cast<std::size_t>(std::floor(std::sqrt(2.0) * half)) + 1;
}

template <typename T>
Spectrum dft2d(const Tensor<T>& image, TransformPath path) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw ShapeError("dft2d", "expected a square [C x d x d] image, got " + shape_str(image.shape()));
  }
  const std::size_t channels = image.dim(0), side = image.dim(1);
  require_side("dft2d", side);
  Spectrum spec{side, channels, std::vector<cplx>(channels * side * side)};
  std::vector<cplx> plane(side * side);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < side * side; ++i) plane[i] = static_cast<double>(image.data()[c * side * side + i]);
    transform(plane.data(), side, false, path);
    for (std::size_t p = 0; p < side; ++p)
      for (std::size_t q = 0; q < side; ++q) spec.at(c, p, q) = plane[shifted(p, side) * side + shifted(q, side)];
  }
  return spec;
}

std::vector<std::complex<double>> idft2d_complex(const Spectrum& spec, TransformPath path) {
  require_side("idft2d", spec.side);
  const std::size_t side = spec.side;
  if (spec.coeffs.size() != spec.channels * side * side) {
    throw ShapeError("idft2d", "coefficient count does not match channels x side x side");
  }
  std::vector<cplx> out(spec.coeffs.size());
  const double norm = 1.0 / static_cast<double>(side * side);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    cplx* plane = out.data() + c * side * side;
    for (std::size_t p = 0; p < side; ++p)
      for (std::size_t q = 0; q < side; ++q) plane[shifted(p, side) * side + shifted(q, side)] = spec.at(c, p, q);
    transform(plane, side, true, path);
    for (std::size_t i = 0; i < side * side; ++i) plane[i] *= norm;
  }
  return out;
}

template <typename T>
Tensor<T> idft2d(const Spectrum& spec, TransformPath path) {
  auto planes = idft2d_complex(spec, path);
  std::vector<T> values(planes.size());
  for (std::size_t i = 0; i < planes.size(); ++i) values[i] = static_cast<T>(planes[i].real());
  return Tensor<T>::from({spec.channels, spec.side, spec.side}, std::move(values));
}

Spectrum apply_mask(const Spectrum& spec, const FrequencyMask& mask) {
  if (mask.side != spec.side) {
    throw ShapeError("apply_mask", Shape{spec.side, spec.side}, Shape{mask.side, mask.side});
  }
  Spectrum out = spec;
  for (std::size_t c = 0; c < spec.channels; ++c)
    for (std::size_t p = 0; p < spec.side; ++p)
      for (std::size_t q = 0; q < spec.side; ++q)
        if (!mask.at(p, q)) out.at(c, p, q) = 0;
  return out;
}

namespace {

// Mask in unshifted layout so planes can be filtered without moving data.
std::vector<double> unshifted_mask(const FrequencyMask& mask) {
  const std::size_t side = mask.side;
  std::vector<double> out(side * side);
  for (std::size_t p = 0; p < side; ++p)
    for (std::size_t q = 0; q < side; ++q) out[shifted(p, side) * side + shifted(q, side)] = mask.at(p, q) ? 1.0 : 0.0;
  return out;
}

template <typename T>
std::vector<T> project_planes(std::span<const T> values, std::size_t planes, std::size_t side,
                              const std::vector<double>& mask) {
  std::vector<T> out(values.size());
  std::vector<cplx> buffer(side * side);
  const double norm = 1.0 / static_cast<double>(side * side);
  bool all_pass = true, all_stop = true;
  for (double m : mask) {
    all_pass = all_pass && m != 0.0;
    all_stop = all_stop && m == 0.0;
  }
  if (all_pass) return std::vector<T>(values.begin(), values.end());
  if (all_stop) return out;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = values.data() + pl * side * side;
    for (std::size_t i = 0; i < side * side; ++i) buffer[i] = static_cast<double>(src[i]);
    transform(buffer.data(), side, false, TransformPath::automatic);
    for (std::size_t i = 0; i < side * side; ++i) buffer[i] *= mask[i];
    transform(buffer.data(), side, true, TransformPath::automatic);
    T* dst = out.data() + pl * side * side;
    for (std::size_t i = 0; i < side * side; ++i) dst[i] = static_cast<T>(buffer[i].real() * norm);
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> band_pass(const Tensor<T>& x, const FrequencyMask& mask) {
  if (x.rank() != 4 || x.dim(2) != x.dim(3)) {
    throw ShapeError("low_pass", "expected square [B x C x d x d] input, got " + shape_str(x.shape()));
  }
  const std::size_t side = x.dim(2);
  require_side("low_pass", side);
  if (mask.side != side) throw ShapeError("low_pass", x.shape(), Shape{mask.side, mask.side});
  const std::size_t planes = x.dim(0) * x.dim(1);
  auto weights = unshifted_mask(mask);
  auto out = project_planes<T>(x.data(), planes, side, weights);
  return detail::make_result<T>(x.shape(), std::move(out), {x},
                                [x, weights = std::move(weights), planes, side](const std::vector<T>& g) {
                                  x.node()->accumulate(project_planes<T>(g, planes, side, weights));
                                });
}

template <typename T>
Tensor<T> low_pass(const Tensor<T>& x, std::size_t radius) {
  if (x.rank() != 4) throw ShapeError("low_pass", "expected [B x C x d x d], got " + shape_str(x.shape()));
  return band_pass(x, radial_mask(x.dim(2), radius, MaskKind::low));
}

template <typename T>
Tensor<T> high_pass(const Tensor<T>& x, std::size_t radius) {
  if (x.rank() != 4) throw ShapeError("high_pass", "expected [B x C x d x d], got " + shape_str(x.shape()));
  return band_pass(x, radial_mask(x.dim(2), radius, MaskKind::high));
}

#define LFFS_INSTANTIATE_SPECTRAL(T)                                  \
  template Spectrum dft2d(const Tensor<T>&, TransformPath);          \
  template Tensor<T> idft2d(const Spectrum&, TransformPath);         \
  template Tensor<T> band_pass(const Tensor<T>&, const FrequencyMask&); \
  template Tensor<T> low_pass(const Tensor<T>&, std::size_t);        \
  template Tensor<T> high_pass(const Tensor<T>&, std::size_t);

LFFS_INSTANTIATE_SPECTRAL(float)
LFFS_INSTANTIATE_SPECTRAL(double)

}  // namespace lffs
