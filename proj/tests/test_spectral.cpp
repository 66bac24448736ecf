#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "helpers.hpp"
#include "lffs/gradcheck.hpp"
#include "lffs/spectral.hpp"

using namespace lffs;
using lffs::test::random_tensor;

namespace {

// Straight from the definition: centered frequency (u, v) = (p - d/2, q - d/2).
std::complex<double> naive_coeff(const Tensor<double>& img, std::size_t c, std::size_t p, std::size_t q) {
  const std::size_t d = img.dim(1);
  const double u = double(p) - double(d / 2), v = double(q) - double(d / 2);
  std::complex<double> acc = 0;
  for (std::size_t m = 0; m < d; ++m)
    for (std::size_t n = 0; n < d; ++n) {
      const double phase = -2 * std::numbers::pi * (u * double(m) + v * double(n)) / double(d);
      acc += img.at((c * d + m) * d + n) * std::polar(1.0, phase);
    }
  return acc;
}

std::size_t count_ones(const FrequencyMask& m) {
  std::size_t n = 0;
  for (auto b : m.bits) n += b;
  return n;
}

}  // namespace

TEST_SUITE("spectral") {

TEST_CASE("constant image has a single DC coefficient") {
  const double v = 0.37;
  auto img = Tensor<double>::full({1, 4, 4}, v);
  auto spec = dft2d(img);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t q = 0; q < 4; ++q) {
      const auto z = spec.at(0, p, q);
      if (p == 2 && q == 2) {
        CHECK(z.real() == doctest::Approx(v * 16).epsilon(1e-12));
        CHECK(std::abs(z.imag()) < 1e-12);
      } else {
        CHECK(std::abs(z) < 1e-12);
      }
    }
}

TEST_CASE("dft matches the definition on both paths") {
  Rng rng(21);
  auto img = random_tensor({2, 8, 8}, rng, 0, 1);
  for (auto path : {TransformPath::fft, TransformPath::direct}) {
    auto spec = dft2d(img, path);
    double worst = 0;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 8; ++p)
        for (std::size_t q = 0; q < 8; ++q) worst = std::max(worst, std::abs(spec.at(c, p, q) - naive_coeff(img, c, p, q)));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("rejects non-square and odd sides") {
  CHECK_THROWS(dft2d(Tensor<double>::zeros({1, 4, 6})));
  CHECK_THROWS(dft2d(Tensor<double>::zeros({1, 5, 5})));
}

TEST_CASE("non power of two sides use the direct path") {
  Rng rng(4);
  auto img = random_tensor({1, 6, 6}, rng, 0, 1);
  auto spec = dft2d(img);
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t q = 0; q < 6; ++q) CHECK(std::abs(spec.at(0, p, q) - naive_coeff(img, 0, p, q)) < 1e-10);
  auto back = idft2d<double>(spec);
  CHECK(test::max_abs_diff(back.data(), img.data()) < 1e-12);
}

TEST_CASE("round trip and conjugate symmetry") {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    auto img = random_tensor({3, 32, 32}, rng, 0, 1);
    auto spec = dft2d(img);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 32; ++p)
        for (std::size_t q = 0; q < 32; ++q) {
          const auto mirror = spec.at(c, (32 - p) % 32, (32 - q) % 32);
          CHECK(std::abs(spec.at(c, p, q) - std::conj(mirror)) < 1e-9);
        }
    auto back = idft2d<double>(spec);
    CHECK(test::max_abs_diff(back.data(), img.data()) < 1e-6);
  }
}

TEST_CASE("mask examples for d=4") {
  auto r1 = radial_mask(4, 1, MaskKind::low);
  CHECK(count_ones(r1) == 1);
  CHECK(r1.at(2, 2));
  CHECK(count_ones(radial_mask(4, 0, MaskKind::low)) == 0);
  CHECK(count_ones(radial_mask(4, 4, MaskKind::low)) == 16);
  CHECK(count_ones(radial_mask(4, 0, MaskKind::high)) == 16);
  // distance exactly 1 is excluded, strict inequality
  auto r2 = radial_mask(4, 2, MaskKind::low);
  CHECK(r2.at(1, 2));
  CHECK(r2.at(1, 1));  // √2 < 2
  CHECK_FALSE(r2.at(0, 2));  // distance 2
}

TEST_CASE("mask entries follow the strict radius rule and nest") {
  for (std::size_t d : {4u, 8u, 32u}) {
    const std::size_t full = full_pass_radius(d);
    CHECK(count_ones(radial_mask(d, full, MaskKind::low)) == d * d);
    CHECK(count_ones(radial_mask(d, full - 1, MaskKind::low)) < d * d);
    for (std::size_t r = 0; r <= full; ++r) {
      auto lo = radial_mask(d, r, MaskKind::low);
      auto hi = radial_mask(d, r, MaskKind::high);
      for (std::size_t p = 0; p < d; ++p)
        for (std::size_t q = 0; q < d; ++q) {
          const double dp = double(p) - double(d / 2), dq = double(q) - double(d / 2);
          CHECK(lo.at(p, q) == (dp * dp + dq * dq < double(r * r)));
          CHECK(hi.at(p, q) != lo.at(p, q));
        }
      if (r > 0) {
        auto prev = radial_mask(d, r - 1, MaskKind::low);
        for (std::size_t i = 0; i < d * d; ++i) CHECK(prev.bits[i] <= lo.bits[i]);
      }
    }
  }
}

TEST_CASE("low pass with radius one gives the channel mean") {
  Rng rng(23);
  auto x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
  auto y = low_pass(x, 1);
  for (std::size_t plane = 0; plane < 6; ++plane) {
    double mean = 0;
    for (std::size_t i = 0; i < 64; ++i) mean += x.at(plane * 64 + i);
    mean /= 64;
    for (std::size_t i = 0; i < 64; ++i) CHECK(y.at(plane * 64 + i) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("projection properties on 32x32 colour images") {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({1, 3, 32, 32}, rng, 0, 1);
    auto z = random_tensor({1, 3, 32, 32}, rng, 0, 1);
    for (std::size_t r : {1u, 2u, 5u, 16u}) {
      auto xl = low_pass(x, r);
      auto xh = high_pass(x, r);
      auto sum_back = add(xl, xh);
      CHECK(test::max_abs_diff(sum_back.data(), x.data()) < 1e-6);
      CHECK(test::max_abs_diff(low_pass(xl, r).data(), xl.data()) < 1e-6);
      const double a = 0.7, b = -1.3;
      auto lhs = low_pass(add(scale(x, a), scale(z, b)), r);
      auto rhs = add(scale(xl, a), scale(low_pass(z, r), b));
      CHECK(test::max_abs_diff(lhs.data(), rhs.data()) < 1e-6);
    }
    auto whole = low_pass(x, full_pass_radius(32));
    CHECK(test::max_abs_diff(whole.data(), x.data()) < 1e-6);
  }
}

TEST_CASE("parseval") {
  Rng rng(25);
  auto img = random_tensor({3, 32, 32}, rng, 0, 1);
  auto spec = dft2d(img);
  double spatial = 0, freq = 0;
  for (double v : img.values()) spatial += v * v;
  for (const auto& z : spec.coeffs) freq += std::norm(z);
  CHECK(freq / (32.0 * 32.0) == doctest::Approx(spatial).epsilon(1e-12));
}

TEST_CASE("masked inverse of a real image has no imaginary residue") {
  Rng rng(26);
  for (int trial = 0; trial < 5; ++trial) {
    auto img = random_tensor({3, 32, 32}, rng, 0, 1);
    for (std::size_t r : {1u, 3u, 8u, 17u}) {
      auto masked = apply_mask(dft2d(img), radial_mask(32, r, MaskKind::low));
      double worst = 0;
      for (const auto& z : idft2d_complex(masked)) worst = std::max(worst, std::abs(z.imag()));
      CHECK(worst < 1e-9);
    }
  }
}

TEST_CASE("gradient through low pass") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(27, seed));
    auto x = random_tensor({2, 2, 8, 8}, rng, 0, 1);
    auto w = test::uniform(x.numel(), rng);
    const std::size_t r = 1 + seed % 5;
    auto fn = [&](const Tensor<double>& t) { return test::project(low_pass(t, r), w); };
    CHECK(finite_diff_check<double>(fn, x, 1e-6) < 1e-5);
    auto sq = [&](const Tensor<double>& t) {
      auto y = high_pass(t, r);
      return sum(mul(y, y));
    };
    CHECK(finite_diff_check<double>(sq, x, 1e-6) < 1e-5);
  }
}

}  // TEST_SUITE
