#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "lffs/tensor.hpp"

namespace lffs {

/// Per-channel 2D spectrum with the zero frequency shifted to (side/2, side/2).
struct Spectrum {
  std::size_t side = 0;
  std::size_t channels = 0;
  std::vector<std::complex<double>> coeffs;  // [channel][row][col]

  std::complex<double>& at(std::size_t c, std::size_t p, std::size_t q) {
    return coeffs[(c * side + p) * side + q];
  }
  const std::complex<double>& at(std::size_t c, std::size_t p, std::size_t q) const {
    return coeffs[(c * side + p) * side + q];
  }
};

enum class MaskKind { low, high };

/// Centered binary radial mask. A low mask keeps (p,q) iff its euclidean
/// distance from (side/2, side/2) is strictly below the radius; a high mask
/// is the complement.
struct FrequencyMask {
  std::size_t side = 0;
  std::size_t radius = 0;
  MaskKind kind = MaskKind::low;
  std::vector<std::uint8_t> bits;  // row-major, centered layout

  bool at(std::size_t p, std::size_t q) const { return bits[p * side + q] != 0; }
};

enum class TransformPath {
  automatic,  // radix-2 FFT when the side is a power of two, else direct
  fft,
  direct,
};

FrequencyMask radial_mask(std::size_t side, std::size_t radius, MaskKind kind);

/// Smallest radius whose low mask is all ones.
std::size_t full_pass_radius(std::size_t side);

/// Unnormalized forward DFT of each channel of a [C×d×d] image, then the
/// zero-frequency shift. Rejects non-square, odd, or sub-2 sides.
template <typename T>
Spectrum dft2d(const Tensor<T>& image, TransformPath path = TransformPath::automatic);

/// Inverse shift, inverse DFT scaled by 1/d², complex result per channel.
std::vector<std::complex<double>> idft2d_complex(const Spectrum& spec,
                                                 TransformPath path = TransformPath::automatic);

/// Real part of idft2d_complex as a [C×d×d] tensor.
template <typename T>
Tensor<T> idft2d(const Spectrum& spec, TransformPath path = TransformPath::automatic);

Spectrum apply_mask(const Spectrum& spec, const FrequencyMask& mask);

/// Differentiable spectral projection of every plane of x[B×C×d×d]; the
/// gradient is the same projection of the upstream gradient. No clamping.
template <typename T>
Tensor<T> band_pass(const Tensor<T>& x, const FrequencyMask& mask);

template <typename T>
Tensor<T> low_pass(const Tensor<T>& x, std::size_t radius);

template <typename T>
Tensor<T> high_pass(const Tensor<T>& x, std::size_t radius);

}  // namespace lffs
