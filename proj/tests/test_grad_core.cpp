#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "lffs/gradcheck.hpp"
#include "lffs/losses.hpp"
#include "lffs/optim.hpp"

using namespace lffs;
using lffs::test::project;
using lffs::test::random_tensor;

namespace {

using Fn = std::function<Tensor<double>(const Tensor<double>&)>;

double check(const Fn& fn, const Tensor<double>& x) { return finite_diff_check<double>(fn, x, 1e-6); }

// Wraps an op with a projection onto fixed weights drawn from the seed.
Fn projected(std::function<Tensor<double>(const Tensor<double>&)> op, Shape out_shape, Rng& rng) {
  auto w = test::uniform(shape_numel(out_shape), rng);
  return [op, w](const Tensor<double>& x) { return project(op(x), w); };
}

}  // namespace

TEST_SUITE("grad-core") {

TEST_CASE("relu and softmax examples") {
  auto x = Tensor<double>::from({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.values() == std::vector<double>{0, 0, 2});

  auto s = softmax(Tensor<double>::from({1, 2}, {0, 0}));
  CHECK(s.at(0) == doctest::Approx(0.5));
  CHECK(s.at(1) == doctest::Approx(0.5));
}

TEST_CASE("identity kernel convolution returns the image") {
  Rng rng(3);
  auto x = random_tensor({2, 3, 5, 5}, rng);
  std::vector<double> k(3 * 3 * 9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) k[(c * 3 + c) * 9 + 4] = 1.0;
  auto w = Tensor<double>::from({3, 3, 3, 3}, k);
  auto y = conv2d(x, w, Tensor<double>{}, {1, 1});
  REQUIRE(y.shape() == x.shape());
  CHECK(test::max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("shape mismatch names the op and both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  try {
    (void)matmul(a, b);
    FAIL("matmul accepted incompatible shapes");
  } catch (const ShapeError& err) {
    const std::string msg = err.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor<double>::zeros({3}), Tensor<double>::zeros({4})), ShapeError);
}

TEST_CASE("cross entropy examples") {
  const std::vector<int> zero{0}, one{1};
  auto l1 = cross_entropy(Tensor<double>::from({1, 2}, {std::log(3.0), 0.0}), zero);
  CHECK(l1.item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(l1.item() == doctest::Approx(0.28768).epsilon(1e-4));
  auto l2 = cross_entropy(Tensor<double>::from({1, 2}, {100.0, 0.0}), zero);
  CHECK(l2.item() < 1e-12);
  auto l3 = cross_entropy(Tensor<double>::from({1, 2}, {0.0, 0.0}), one);
  CHECK(l3.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const std::vector<int> bad{2};
  CHECK_THROWS(cross_entropy(Tensor<double>::from({1, 2}, {0.0, 0.0}), bad));
  const std::vector<int> negative{-1};
  CHECK_THROWS(cross_entropy(Tensor<double>::from({1, 2}, {0.0, 0.0}), negative));
}

TEST_CASE("entropy examples") {
  auto uniform = entropy_loss(Tensor<double>::full({1, 5}, 0.7));
  CHECK(uniform.item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(uniform.item() == doctest::Approx(1.60944).epsilon(1e-5));
  auto peaked = entropy_loss(Tensor<double>::from({1, 5}, {50, 0, 0, 0, 0}));
  CHECK(peaked.item() < 1e-15);
  auto two = entropy_loss(Tensor<double>::from({1, 2}, {std::log(2.0), 0.0}));
  const double expect = -(2.0 / 3) * std::log(2.0 / 3) - (1.0 / 3) * std::log(1.0 / 3);
  CHECK(two.item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(two.item() == doctest::Approx(0.63651).epsilon(1e-4));
}

TEST_CASE("cosine similarity examples") {
  auto same = cosine_similarity(Tensor<double>::from({1, 3}, {1, 2, 3}), Tensor<double>::from({1, 3}, {1, 2, 3}));
  CHECK(same.item() == doctest::Approx(1.0).epsilon(1e-12));
  auto orth = cosine_similarity(Tensor<double>::from({1, 2}, {1, 0}), Tensor<double>::from({1, 2}, {0, 1}));
  CHECK(std::abs(orth.item()) < 1e-15);
  auto anti = cosine_similarity(Tensor<double>::from({1, 2}, {1, 2}), Tensor<double>::from({1, 2}, {-2, -4}));
  CHECK(anti.item() == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("kl divergence examples") {
  auto t = Tensor<double>::from({1, 2}, {std::log(3.0), 0.0});
  auto s = Tensor<double>::from({1, 2}, {0.0, 0.0});
  CHECK(kl_div_loss(t, t).item() == doctest::Approx(0.0));
  const double expect = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  CHECK(kl_div_loss(s, t).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(kl_div_loss(s, t).item() == doctest::Approx(0.13081).epsilon(1e-4));

  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    auto a = random_tensor({3, 4}, rng, -5, 5);
    auto b = random_tensor({3, 4}, rng, -5, 5);
    CHECK(kl_div_loss(a, b).item() >= 0.0);
  }
}

TEST_CASE("backward examples") {
  auto w = Tensor<double>::from({3}, {0.3, -1, 2}, true);
  sum(w).backward();
  CHECK(w.grad() == std::vector<double>{1, 1, 1});

  auto v = Tensor<double>::from({2}, {1, 2}, true);
  dot(v, v).backward();
  CHECK(v.grad() == std::vector<double>{2, 4});

  CHECK_THROWS_AS(v.backward(), ShapeError);
}

TEST_CASE("gradients accumulate until zeroed") {
  auto w = Tensor<double>::from({2}, {1, 2}, true);
  sum(w).backward();
  sum(scale(w, 3.0)).backward();
  CHECK(w.grad() == std::vector<double>{4, 4});
  w.zero_grad();
  CHECK(w.grad() == std::vector<double>{0, 0});
}

TEST_CASE("no-grad guard records nothing") {
  auto w = Tensor<double>::from({2}, {1, 2}, true);
  Tensor<double> loss;
  {
    NoGradGuard guard;
    loss = dot(w, w);
  }
  CHECK_FALSE(loss.requires_grad());
  CHECK(GradMode::enabled());
}

TEST_CASE("sgd step without momentum") {
  auto w = Tensor<double>::from({1}, {1.0}, true);
  Optimizer<double> opt({w}, OptimizerConfig{OptimizerKind::sgd_momentum, 0.1, 0.0, 0.0});
  sum(scale(w, 2.0)).backward();
  opt.step();
  CHECK(w.at(0) == doctest::Approx(0.8).epsilon(1e-15));
  opt.zero_grad();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("sgd momentum follows the heavy-ball recursion") {
  auto w = Tensor<double>::from({1}, {1.0}, true);
  Optimizer<double> opt({w}, OptimizerConfig{OptimizerKind::sgd_momentum, 0.1, 0.9, 0.0});
  double ref = 1.0, buf = 0.0;
  for (int step = 0; step < 5; ++step) {
    opt.zero_grad();
    dot(w, w).backward();
    opt.step();
    buf = 0.9 * buf + 2 * ref;
    ref -= 0.1 * buf;
    CHECK(w.at(0) == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("adam first step moves each coordinate by about lr") {
  auto w = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.learning_rate = 0.01;
  Optimizer<double> opt({w}, cfg);
  // grad = 2w; bias-corrected first step is lr·g/(|g| + eps)
  dot(w, w).backward();
  opt.step();
  const std::vector<double> start{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double g = 2 * start[i];
    CHECK(w.at(i) == doctest::Approx(start[i] - 0.01 * g / (std::abs(g) + 1e-8)).epsilon(1e-12));
  }
  CHECK(opt.step_count() == 1);
}

TEST_CASE("cosine annealed rate endpoints") {
  CHECK(std::abs(cosine_annealed_rate(0.05, 0, 20) - 0.05) < 1e-12);
  CHECK(std::abs(cosine_annealed_rate(0.05, 20, 20)) < 1e-12);
  CHECK(cosine_annealed_rate(0.05, 10, 20) == doctest::Approx(0.025));
}

TEST_CASE("softmax rows sum to one and ignore shifts") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 7}, rng, -20, 20);
    auto shifted = x.clone();
    for (std::size_t r = 0; r < 4; ++r) {
      const double c = test::uniform(1, rng, -50, 50)[0];
      for (std::size_t j = 0; j < 7; ++j) shifted.values()[r * 7 + j] += c;
    }
    auto p = softmax(x);
    auto q = softmax(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 7; ++j) total += p.at(r * 7 + j);
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
    CHECK(test::max_abs_diff(p.data(), q.data()) < 1e-9);
  }
}

TEST_CASE("finite difference oracle examples") {
  Rng rng(11);
  auto x = random_tensor({5}, rng);
  CHECK(check([](const Tensor<double>& t) { return dot(t, t); }, x) < 1e-6);
  const std::vector<int> labels{0, 2, 1, 1};
  auto logits = random_tensor({4, 3}, rng, -2, 2);
  CHECK(check([&](const Tensor<double>& t) { return cross_entropy(t, labels); }, logits) < 1e-5);
}

TEST_CASE("every differentiable op passes the gradient check over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    Rng rng(derive_seed(1234, seed));
    const std::vector<int> labels{0, 2, 1};

    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    CHECK(check(projected([&](const Tensor<double>& t) { return matmul(t, b); }, {3, 2}, rng), a) < 1e-5);
    CHECK(check(projected([&](const Tensor<double>& t) { return matmul(a, t); }, {3, 2}, rng), b) < 1e-5);

    auto lw = random_tensor({5, 4}, rng);
    auto lb = random_tensor({5}, rng);
    auto lin = [&](const Tensor<double>& x) { return linear(x, lw, lb); };
    CHECK(check(projected(lin, {3, 5}, rng), a) < 1e-5);
    CHECK(check(projected([&](const Tensor<double>& t) { return linear(a, t, lb); }, {3, 5}, rng), lw) < 1e-5);
    CHECK(check(projected([&](const Tensor<double>& t) { return linear(a, lw, t); }, {3, 5}, rng), lb) < 1e-5);

    auto img = random_tensor({2, 2, 6, 6}, rng);
    auto kw = random_tensor({3, 2, 3, 3}, rng);
    auto kb = random_tensor({3}, rng);
    for (auto opts : {Conv2dOptions{1, 1}, Conv2dOptions{2, 0}, Conv2dOptions{1, 0}}) {
      const std::size_t out = (6 + 2 * opts.padding - 3) / opts.stride + 1;
      const Shape shape{2, 3, out, out};
      CHECK(check(projected([&](const Tensor<double>& t) { return conv2d(t, kw, kb, opts); }, shape, rng), img) <
            1e-5);
      CHECK(check(projected([&](const Tensor<double>& t) { return conv2d(img, t, kb, opts); }, shape, rng), kw) <
            1e-5);
      CHECK(check(projected([&](const Tensor<double>& t) { return conv2d(img, kw, t, opts); }, shape, rng), kb) <
            1e-5);
    }

    CHECK(check(projected([](const Tensor<double>& t) { return relu(t); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return max_pool2d(t, 2); }, {2, 2, 3, 3}, rng), img) < 1e-5);

    auto gamma = random_tensor({2}, rng, 0.5, 1.5);
    auto beta = random_tensor({2}, rng);
    for (auto mode : {BatchNormMode::train, BatchNormMode::eval}) {
      BatchNormStats<double> stats{{0.1, -0.2}, {1.3, 0.7}};
      auto bn = [&](const Tensor<double>& x) {
        BatchNormStats<double> scratch = stats;  // train mode updates running statistics
        return batchnorm2d(x, gamma, beta, scratch, mode);
      };
      CHECK(check(projected(bn, {2, 2, 6, 6}, rng), img) < 1e-5);
      auto bn_gamma = [&](const Tensor<double>& g) {
        BatchNormStats<double> scratch = stats;
        return batchnorm2d(img, g, beta, scratch, mode);
      };
      CHECK(check(projected(bn_gamma, {2, 2, 6, 6}, rng), gamma) < 1e-5);
      auto bn_beta = [&](const Tensor<double>& bt) {
        BatchNormStats<double> scratch = stats;
        return batchnorm2d(img, gamma, bt, scratch, mode);
      };
      CHECK(check(projected(bn_beta, {2, 2, 6, 6}, rng), beta) < 1e-5);
    }

    CHECK(check(projected([](const Tensor<double>& t) { return reshape(t, {4, 3}); }, {4, 3}, rng), a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return flatten(t); }, {2, 72}, rng), img) < 1e-5);

    auto c = random_tensor({3, 4}, rng);
    CHECK(check(projected([&](const Tensor<double>& t) { return add(t, c); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([&](const Tensor<double>& t) { return sub(c, t); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([&](const Tensor<double>& t) { return mul(t, c); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return mul(t, t); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return scale(t, -2.5); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check([](const Tensor<double>& t) { return sum(t); }, a) < 1e-5);
    CHECK(check([](const Tensor<double>& t) { return mean(t); }, a) < 1e-5);
    CHECK(check([](const Tensor<double>& t) { return l2_norm(t); }, a) < 1e-5);
    CHECK(check([&](const Tensor<double>& t) { return dot(t, c); }, a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return softmax(t); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return log_softmax(t); }, {3, 4}, rng), a) < 1e-5);
    CHECK(check(projected([](const Tensor<double>& t) { return normalize_rows(t, 1e-8); }, {3, 4}, rng), a) < 1e-5);

    auto logits = random_tensor({3, 3}, rng, -3, 3);
    auto other = random_tensor({3, 3}, rng, -3, 3);
    CHECK(check([&](const Tensor<double>& t) { return cross_entropy(t, labels); }, logits) < 1e-5);
    CHECK(check([](const Tensor<double>& t) { return entropy_loss(t); }, logits) < 1e-5);
    CHECK(check([&](const Tensor<double>& t) { return cosine_similarity(t, other); }, logits) < 1e-5);
    CHECK(check([&](const Tensor<double>& t) { return cosine_similarity(other, t); }, logits) < 1e-5);
    CHECK(check([&](const Tensor<double>& t) { return kl_div_loss(t, other); }, logits) < 1e-5);
    CHECK(check([&](const Tensor<double>& t) { return kl_div_loss(other, t); }, logits) < 1e-5);
  }
}

TEST_CASE("frozen batchnorm is a fixed affine map") {
  Rng rng(8);
  auto x = random_tensor({3, 2, 4, 4}, rng);
  auto gamma = random_tensor({2}, rng);
  auto beta = random_tensor({2}, rng);
  BatchNormStats<double> stats{{0.3, -0.1}, {0.9, 1.7}};
  const auto before = stats;
  auto y1 = batchnorm2d(x, gamma, beta, stats, BatchNormMode::frozen);
  auto y2 = batchnorm2d(x, gamma, beta, stats, BatchNormMode::frozen);
  CHECK(y1.values() == y2.values());
  CHECK(stats.running_mean == before.running_mean);
  CHECK(stats.running_var == before.running_var);

  sum(y1).backward();
  CHECK_FALSE(gamma.has_grad());
  CHECK_FALSE(beta.has_grad());
  CHECK(x.has_grad());

  // affine map with the stored statistics, recomputed by hand
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = (i / 16) % 2;
    const double expect =
        gamma.at(c) * (x.at(i) - before.running_mean[c]) / std::sqrt(before.running_var[c] + 1e-5) + beta.at(c);
    CHECK(y1.at(i) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("train batchnorm updates running statistics") {
  Rng rng(9);
  auto x = random_tensor({4, 1, 2, 2}, rng);
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::full({1}, 0.0);
  BatchNormStats<double> stats{{0.0}, {1.0}};
  (void)batchnorm2d(x, gamma, beta, stats, BatchNormMode::train);
  const double m = std::accumulate(x.values().begin(), x.values().end(), 0.0) / 16.0;
  CHECK(stats.running_mean[0] == doctest::Approx(0.1 * m).epsilon(1e-12));
}

}  // TEST_SUITE
