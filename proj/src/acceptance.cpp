#include "lffs/acceptance.hpp"

#include <chrono>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>

#include "lffs/gradcheck.hpp"
#include "lffs/losses.hpp"
#include "lffs/spectral.hpp"

namespace lffs {

namespace {

using D = double;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::scientific << v;
  return os.str();
}

Tensor<D> random_tensor(Shape shape, Rng& rng, D lo = -1, D hi = 1) {
  std::uniform_real_distribution<D> u(lo, hi);
  std::vector<D> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<D>::from(std::move(shape), std::move(v));
}

double max_abs_diff(std::span<const D> a, std::span<const D> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Spectrum straight from the definition, zero frequency moved to the centre.
std::vector<std::complex<D>> naive_spectrum(std::span<const D> plane, std::size_t d) {
  std::vector<std::complex<D>> out(d * d);
  const D w = -2.0 * std::numbers::pi / static_cast<D>(d);
  for (std::size_t u = 0; u < d; ++u)
    for (std::size_t v = 0; v < d; ++v) {
      std::complex<D> acc = 0;
      for (std::size_t m = 0; m < d; ++m)
        for (std::size_t n = 0; n < d; ++n) acc += plane[m * d + n] * std::polar(1.0, w * static_cast<D>(u * m + v * n));
      out[((u + d / 2) % d) * d + (v + d / 2) % d] = acc;
    }
  return out;
}

/// Worst finite-difference error of `f` with respect to each of `inputs`,
/// after contracting a non-scalar output with a fixed random tensor.
double grad_error(const std::function<Tensor<D>()>& f, const std::vector<Tensor<D>>& inputs, Rng& rng) {
  Tensor<D> probe;
  {
    NoGradGuard no_grad;
    const auto out = f();
    if (out.numel() != 1) probe = random_tensor(out.shape(), rng);
  }
  std::function<Tensor<D>()> loss = [&] { return probe.defined() ? dot(f(), probe) : f(); };
  double worst = 0;
  for (const auto& x : inputs) worst = std::max(worst, finite_diff_check<D>(loss, x, 1e-6));
  return worst;
}

}  // namespace

CriterionResult check_spectral(std::uint64_t seed) {
  const auto start = Clock::now();
  CriterionResult r{1, "spectral correctness", false, "", 0};
  Rng rng(seed);
  constexpr std::size_t kImages = 20, kC = 3, kD = 32;
  const std::size_t radii[] = {1, 2, 5, 8, 13, 16, 23};
  double roundtrip = 0, parseval = 0, complement = 0, idempotent = 0, linear = 0, paths = 0, naive = 0;
  for (std::size_t i = 0; i < kImages; ++i) {
    const auto img = random_tensor({kC, kD, kD}, rng, 0, 1);
    const auto spec = dft2d(img);
    roundtrip = std::max(roundtrip, max_abs_diff(idft2d<D>(spec).data(), img.data()));

    for (std::size_t c = 0; c < kC; ++c) {
      double energy = 0, spectral = 0;
      for (std::size_t k = 0; k < kD * kD; ++k) {
        energy += img.at(c * kD * kD + k) * img.at(c * kD * kD + k);
        spectral += std::norm(spec.coeffs[c * kD * kD + k]);
      }
      parseval = std::max(parseval, std::abs(energy - spectral / (kD * kD)) / energy);
    }

    const auto fast = dft2d(img, TransformPath::fft), direct = dft2d(img, TransformPath::direct);
    for (std::size_t k = 0; k < fast.coeffs.size(); ++k) paths = std::max(paths, std::abs(fast.coeffs[k] - direct.coeffs[k]));
    const auto back_fast = idft2d_complex(fast, TransformPath::fft), back_direct = idft2d_complex(fast, TransformPath::direct);
    for (std::size_t k = 0; k < back_fast.size(); ++k) paths = std::max(paths, std::abs(back_fast[k] - back_direct[k]));
    if (i < 2) {
      // Definition-level oracle on the first channel of a couple of images.
      const auto ref = naive_spectrum(img.data().subspan(0, kD * kD), kD);
      for (std::size_t k = 0; k < ref.size(); ++k) naive = std::max(naive, std::abs(ref[k] - fast.coeffs[k]));
    }

    const auto batch = reshape(img, {1, kC, kD, kD});
    const auto other = random_tensor({1, kC, kD, kD}, rng, 0, 1);
    const D a = 0.7, b = -1.3;
    for (std::size_t radius : radii) {
      const auto lo = low_pass(batch, radius), hi = high_pass(batch, radius);
      complement = std::max(complement, max_abs_diff(add(lo, hi).data(), batch.data()));
      idempotent = std::max(idempotent, max_abs_diff(low_pass(lo, radius).data(), lo.data()));
      const auto lhs = low_pass(add(scale(batch, a), scale(other, b)), radius);
      const auto rhs = add(scale(lo, a), scale(low_pass(other, radius), b));
      linear = std::max(linear, max_abs_diff(lhs.data(), rhs.data()));
    }
  }
  r.seconds = seconds_since(start);
  const double worst = std::max({roundtrip, parseval, complement, idempotent, linear});
  r.pass = worst <= 1e-6 && paths <= 1e-9 && naive <= 1e-9 && r.seconds < 10.0;
  r.detail = "round trip " + sci(roundtrip) + ", Parseval " + sci(parseval) + ", complement " + sci(complement) +
             ", idempotence " + sci(idempotent) + ", linearity " + sci(linear) + ", fft vs direct " + sci(paths) +
             ", vs definition " + sci(naive);
  return r;
}

CriterionResult check_gradients(std::uint64_t seed) {
  const auto start = Clock::now();
  CriterionResult r{2, "gradient oracle", false, "", 0};
  Rng rng(seed);
  std::vector<std::pair<std::string, double>> cases;
  auto run = [&](const std::string& name, const std::function<Tensor<D>()>& f, const std::vector<Tensor<D>>& inputs) {
    cases.emplace_back(name, grad_error(f, inputs, rng));
  };

  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({3, 4}, rng);
  auto w = random_tensor({5, 4}, rng), bias = random_tensor({5}, rng);
  run("matmul", [&] { return matmul(a, b); }, {a, b});
  run("linear", [&] { return linear(a, w, bias); }, {a, w, bias});
  run("add", [&] { return add(a, c); }, {a, c});
  run("sub", [&] { return sub(a, c); }, {a, c});
  run("mul", [&] { return mul(a, c); }, {a, c});
  run("scale", [&] { return scale(a, D(-2.5)); }, {a});
  run("sum", [&] { return sum(a); }, {a});
  run("mean", [&] { return mean(a); }, {a});
  run("l2_norm", [&] { return l2_norm(a); }, {a});
  run("dot", [&] { return dot(a, c); }, {a, c});
  run("softmax", [&] { return softmax(a); }, {a});
  run("log_softmax", [&] { return log_softmax(a); }, {a});
  run("normalize_rows", [&] { return normalize_rows(a, D(1e-8)); }, {a});
  run("reshape", [&] { return reshape(a, {2, 6}); }, {a});
  run("relu", [&] { return relu(a); }, {a});

  const std::vector<int> labels{0, 2, 1};
  run("cross_entropy", [&] { return cross_entropy(a, labels); }, {a});
  run("entropy_loss", [&] { return entropy_loss(a); }, {a});
  run("cosine_similarity", [&] { return cosine_similarity(a, c); }, {a, c});
  run("kl_div_loss", [&] { return kl_div_loss(a, c); }, {a, c});

  auto img = random_tensor({2, 2, 6, 6}, rng), kernel = random_tensor({3, 2, 3, 3}, rng), kb = random_tensor({3}, rng);
  run("conv2d", [&] { return conv2d(img, kernel, kb, {1, 1}); }, {img, kernel, kb});
  run("conv2d stride 2", [&] { return conv2d(img, kernel, kb, {2, 0}); }, {img, kernel, kb});
  run("max_pool2d", [&] { return max_pool2d(img, 2); }, {img});
  run("flatten", [&] { return flatten(img); }, {img});
  auto gamma = random_tensor({2}, rng, 0.5, 1.5), beta = random_tensor({2}, rng);
  BatchNormStats<D> stats{{0.1, -0.2}, {1.3, 0.7}};
  run("batchnorm2d train", [&] { return batchnorm2d(img, gamma, beta, stats, BatchNormMode::train); }, {img, gamma, beta});
  BatchNormStats<D> fixed_stats{{0.1, -0.2}, {1.3, 0.7}};
  run("batchnorm2d eval", [&] { return batchnorm2d(img, gamma, beta, fixed_stats, BatchNormMode::eval); },
      {img, gamma, beta});

  auto planes = random_tensor({1, 2, 8, 8}, rng);
  run("low_pass", [&] { return low_pass(planes, 3); }, {planes});
  run("high_pass", [&] { return high_pass(planes, 3); }, {planes});

  // Tiny conv-4 network, every parameter and the input.
  ConvNet<D> net(ConvNetConfig{2, 16, 4, 3});
  Rng init(derive_seed(seed, 1));
  net.init(init);
  auto x = random_tensor({3, 2, 16, 16}, rng, 0, 1);
  const std::vector<int> y{0, 1, 2};
  auto params = net.parameters();
  std::vector<Tensor<D>> net_inputs = params;
  net_inputs.push_back(x);
  net.set_bn_mode(BatchNormMode::train);
  run("conv-4 loss, batchnorm train", [&] { return cross_entropy(net.forward(x), y); }, net_inputs);
  net.set_bn_mode(BatchNormMode::eval);
  run("conv-4 loss, batchnorm eval", [&] { return cross_entropy(net.forward(x), y); }, net_inputs);
  run("conv-4 on low_pass input", [&] { return cross_entropy(net.forward(low_pass(x, 4)), y); }, {x});

  FewShotModel<D> model{net.clone(), {}};
  model.backbone.set_bn_mode(BatchNormMode::frozen);
  {
    NoGradGuard no_grad;
    model.head = init_head_from_support(model.backbone.forward(x), y, 3, D(10));
  }
  run("cosine head", [&] { return cross_entropy(model.forward(x), y); }, {x, model.head.weight});

  // Attack gradient through both surfaces against plain central differences.
  const RadiusDistribution weights{{8, 5, 2}, {0.2, 0.5, 0.3}};
  const ForwardFn<D> surfaces[] = {
      [&](const Tensor<D>& v) { return model.forward(v); },
      [&](const Tensor<D>& v) {
        return ensemble_logits<D>([&](const Tensor<D>& u) { return model.forward(u); }, v, weights);
      }};
  const char* surface_names[] = {"attack gradient, plain", "attack gradient, ensemble"};
  for (int s = 0; s < 2; ++s) {
    const auto g = input_gradient(surfaces[s], x, y);
    NoGradGuard no_grad;
    auto probe = x.clone();
    double worst = 0;
    for (std::size_t i = 0; i < probe.numel(); ++i) {
      const D saved = probe.at(i);
      probe.data()[i] = saved + 1e-6;
      const D up = cross_entropy(surfaces[s](probe), y).item();
      probe.data()[i] = saved - 1e-6;
      const D down = cross_entropy(surfaces[s](probe), y).item();
      probe.data()[i] = saved;
      const D numeric = (up - down) / 2e-6;
      worst = std::max(worst, std::abs(g[i] - numeric) / std::max({1.0, std::abs(g[i]), std::abs(numeric)}));
    }
    cases.emplace_back(surface_names[s], worst);
  }

  r.seconds = seconds_since(start);
  std::string worst_name;
  double worst = 0;
  for (const auto& [name, err] : cases) {
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  }
  r.pass = worst < 1e-4 && r.seconds < 60.0;
  r.detail = std::to_string(cases.size()) + " cases, worst relative error " + sci(worst) + " (" + worst_name + ")";
  return r;
}

CriterionResult check_schedule(std::uint64_t seed) {
  const auto start = Clock::now();
  CriterionResult r{3, "progressive schedule", false, "", 0};
  double weight_err = 0;
  for (double lambda : {0.5, 0.8}) {
    const auto s = init_schedule(16, 2, lambda, 0.98);
    double norm = 0;
    for (std::size_t i = 0; i < s.size(); ++i) norm += std::pow(lambda, static_cast<double>(i));
    for (std::size_t i = 0; i < s.size(); ++i) {
      weight_err = std::max(weight_err, std::abs(s.weights[i] - std::pow(lambda, static_cast<double>(i)) / norm));
    }
  }

  auto s = init_schedule(16, 2, 0.8, 0.98);
  std::size_t shifts = 0;
  bool ordered = true;
  for (int epoch = 0; epoch < 40; ++epoch) {
    const auto next = maybe_shift(s, 1.0);
    if (next.peak_radius() != s.peak_radius()) {
      ++shifts;
      ordered = ordered && next.peak_radius() + 1 == s.peak_radius();
    }
    s = next;
  }
  const bool traverse = shifts == 16 - 2 && s.peak_radius() == 2 && ordered;
  const bool below_threshold_holds = maybe_shift(init_schedule(16, 2, 0.8, 0.98), 0.97).peak_index == 0;

  double tv = 0;
  Rng rng(seed);
  for (std::size_t peak : {std::size_t{0}, std::size_t{6}, std::size_t{14}}) {
    const auto sched = schedule_at_peak(16, 2, 0.8, 0.98, peak);
    std::vector<double> counts(sched.size(), 0.0);
    constexpr int kDraws = 100000;
    for (int i = 0; i < kDraws; ++i) counts[16 - sample_radius(sched, rng)] += 1.0;
    double dist = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) dist += std::abs(counts[i] / kDraws - sched.weights[i]);
    tv = std::max(tv, 0.5 * dist);
  }

  r.seconds = seconds_since(start);
  r.pass = weight_err <= 1e-12 && traverse && below_threshold_holds && tv < 0.01 && r.seconds < 10.0;
  r.detail = "weight error " + sci(weight_err) + "; forced shifts " + std::to_string(shifts) + " (expect 14), final peak " +
             std::to_string(s.peak_radius()) + "; total variation at 1e5 draws " + sci(tv);
  return r;
}

CriterionResult check_ensemble(std::uint64_t seed) {
  const auto start = Clock::now();
  CriterionResult r{4, "ensemble semantics", false, "", 0};
  Rng rng(seed);
  const auto x = random_tensor({4, 3, 16, 16}, rng, 0, 1);

  // Hand case: the k-th forward call returns the k-th preset row.
  bool hand = false;
  {
    std::size_t call = 0;
    const std::vector<std::vector<D>> rows{{1, 0}, {0, 2}};
    ForwardFn<D> preset = [&](const Tensor<D>&) { return Tensor<D>::from({1, 2}, rows[call++]); };
    const auto out = ensemble_logits(preset, x, RadiusDistribution{{5, 3}, {0.6, 0.4}});
    hand = out.at(0) == 0.6 && out.at(1) == 0.8 && argmax_rows(out)[0] == 1;
  }

  bool constant = false;
  {
    ForwardFn<D> flat = [](const Tensor<D>& v) { return Tensor<D>::from({v.dim(0), 3}, std::vector<D>(v.dim(0) * 3, 1.5)); };
    const auto out = ensemble_logits(flat, x, RadiusDistribution{{9, 4, 2}, {0.25, 0.5, 0.25}});
    constant = true;
    for (D v : out.data()) constant = constant && std::abs(v - 1.5) <= 1e-12;
  }

  FewShotModel<D> model{ConvNet<D>(ConvNetConfig{3, 16, 4, 5}), {}};
  Rng init(derive_seed(seed, 1));
  model.backbone.init(init);
  model.backbone.set_bn_mode(BatchNormMode::frozen);
  {
    NoGradGuard no_grad;
    const std::vector<int> y{0, 1, 2, 3};
    model.head = init_head_from_support(model.backbone.forward(x), y, 4, D(10));
  }
  NoGradGuard no_grad;
  const auto plain = [&](const Tensor<D>& v) { return model.forward(v); };

  bool degenerate = true;
  for (std::size_t radius : {2, 5, 8}) {
    const auto single = model.forward(low_pass(x, radius));
    const auto one = ensemble_logits<D>(plain, x, RadiusDistribution::fixed(radius));
    const auto masked = ensemble_logits<D>(plain, x, RadiusDistribution{{8, 5, 2}, {radius == 8 ? 1.0 : 0.0, radius == 5 ? 1.0 : 0.0, radius == 2 ? 1.0 : 0.0}});
    degenerate = degenerate && max_abs_diff(single.data(), one.data()) == 0 && max_abs_diff(single.data(), masked.data()) == 0;
  }

  bool invariant = true;
  std::uniform_real_distribution<D> u(0.01, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    RadiusDistribution w;
    for (std::size_t radius = 8; radius >= 2; --radius) {
      w.radii.push_back(radius);
      w.weights.push_back(u(rng));
    }
    const D k = u(rng) * 50.0;
    RadiusDistribution scaled = w;
    for (auto& v : scaled.weights) v *= k;
    invariant = invariant && argmax_rows(ensemble_logits<D>(plain, x, w)) == argmax_rows(ensemble_logits<D>(plain, x, scaled));
  }

  r.seconds = seconds_since(start);
  r.pass = hand && constant && degenerate && invariant && r.seconds < 5.0;
  auto word = [](bool ok) { return ok ? "ok" : "FAILED"; };
  r.detail = std::string("hand-computed weighted sum ") + word(hand) + ", constant model " + word(constant) +
             ", degenerate weights " + word(degenerate) + ", positive scaling " + word(invariant);
  return r;
}

std::vector<CriterionResult> run_acceptance(const ExperimentConfig& config, std::size_t workers,
                                            const std::function<void(const CriterionResult&)>& emit,
                                            const Logger& log) {
  std::vector<CriterionResult> out;
  auto record = [&](CriterionResult r) {
    if (emit) emit(r);
    out.push_back(std::move(r));
  };
  const std::uint64_t seed = config.seeds.eval;
  record(check_spectral(derive_seed(seed, 101)));
  record(check_gradients(derive_seed(seed, 102)));
  record(check_schedule(derive_seed(seed, 103)));
  record(check_ensemble(derive_seed(seed, 104)));

  const auto data = generate_data(config);
  auto run_once = [&] {
    return config.precision == 64 ? run_claim<double>(config, data, workers, log)
                                  : run_claim<float>(config, data, workers, log);
  };
  const ClaimRun first = run_once();
  std::optional<ClaimRun> second;
  if (config.claim.check_determinism) {
    if (log) log("second run for the determinism check");
    second = run_once();
  }

  const auto dir = std::filesystem::path(config.output) / "claim";
  std::filesystem::create_directories(dir);
  for (const auto& [name, bytes] : first.artifacts) {
    std::ofstream(dir / name, std::ios::binary) << bytes;
  }
  std::ofstream(dir / "timing.json") << first.timing_json;

  for (auto& r : judge_claim(config, first, second ? &*second : nullptr)) record(std::move(r));
  return out;
}

}  // namespace lffs
