#include "lffs/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lffs/losses.hpp"

namespace lffs {

namespace {

class EnableGradGuard {
 public:
  EnableGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(true); }
  ~EnableGradGuard() { GradMode::set_enabled(previous_); }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
T sign(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

}  // namespace

std::string to_string(AttackSurface surface) { return surface == AttackSurface::plain ? "plain" : "ensemble"; }

AttackSurface attack_surface_from_string(const std::string& name) {
  if (name == "plain") return AttackSurface::plain;
  if (name == "ensemble") return AttackSurface::ensemble;
  throw std::invalid_argument("unknown attack surface '" + name + "' (expected plain or ensemble)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("attack: epsilon must lie in [0, 1]");
  if (iters > 0 && !(step_size > 0.0)) throw std::invalid_argument("attack: step_size must be positive when iters > 0");
}

template <typename T>
std::vector<T> input_gradient(const ForwardFn<T>& forward, const Tensor<T>& x, std::span<const int> labels) {
  EnableGradGuard grad_on;
  auto leaf = Tensor<T>::from(x.shape(), x.values(), true);
  auto loss = cross_entropy(forward(leaf), labels);
  loss.backward();
  return leaf.grad();
}

template <typename T>
Tensor<T> fgsm(const ForwardFn<T>& forward, const Tensor<T>& x, std::span<const int> labels, double epsilon) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("fgsm: epsilon must be non-negative");
  auto values = x.values();
  if (epsilon == 0.0) return Tensor<T>::from(x.shape(), std::move(values));
  const auto g = input_gradient(forward, x, labels);
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::clamp(values[i] + eps * sign(g[i]), T(0), T(1));
  return Tensor<T>::from(x.shape(), std::move(values));
}

template <typename T>
Tensor<T> pgd(const ForwardFn<T>& forward, const Tensor<T>& x, std::span<const int> labels,
              const AttackConfig& config, Rng* rng) {
  config.validate();
  const auto origin = x.values();
  const T eps = static_cast<T>(config.epsilon), step = static_cast<T>(config.step_size);
  std::vector<T> lo(origin.size()), hi(origin.size());
  for (std::size_t i = 0; i < origin.size(); ++i) {
    lo[i] = std::max(origin[i] - eps, T(0));
    hi[i] = std::min(origin[i] + eps, T(1));
  }
  auto current = origin;
  if (config.random_start && config.epsilon > 0.0) {
    if (!rng) throw std::invalid_argument("pgd: random_start needs a generator");
    std::uniform_real_distribution<double> start(-config.epsilon, config.epsilon);
    for (std::size_t i = 0; i < current.size(); ++i) {
      current[i] = std::clamp(static_cast<T>(origin[i] + start(*rng)), lo[i], hi[i]);
    }
  }
  for (std::size_t k = 0; k < config.iters && config.epsilon > 0.0; ++k) {
    const auto g = input_gradient(forward, Tensor<T>::from(x.shape(), current), labels);
    for (std::size_t i = 0; i < current.size(); ++i) {
      current[i] = std::clamp(current[i] + step * sign(g[i]), lo[i], hi[i]);
    }
  }
  return Tensor<T>::from(x.shape(), std::move(current));
}

template <typename T>
double fooling_rate(const ForwardFn<T>& forward, std::span<const int> clean_pred, const Tensor<T>& x_adv) {
  std::vector<int> adv_pred;
  {
    NoGradGuard no_grad;
    adv_pred = argmax_rows(forward(x_adv));
  }
  if (adv_pred.size() != clean_pred.size()) {
    throw ShapeError("fooling_rate", Shape{clean_pred.size()}, Shape{adv_pred.size()});
  }
  if (adv_pred.empty()) return 0.0;
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < adv_pred.size(); ++i) flipped += adv_pred[i] != clean_pred[i];
  return static_cast<double>(flipped) / static_cast<double>(adv_pred.size());
}

template <typename T>
BallReport inspect_ball(const Tensor<T>& x, const Tensor<T>& x_adv) {
  if (x.shape() != x_adv.shape()) throw ShapeError("inspect_ball", x.shape(), x_adv.shape());
  BallReport report;
  const auto a = x.data(), b = x_adv.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    report.max_deviation = std::max(report.max_deviation, std::abs(static_cast<double>(b[i]) - static_cast<double>(a[i])));
    if (!(b[i] >= T(0) && b[i] <= T(1))) report.in_range = false;
  }
  return report;
}

template <typename T>
void require_in_ball(const Tensor<T>& x, const Tensor<T>& x_adv, double epsilon, double tol) {
  const auto report = inspect_ball(x, x_adv);
  if (report.max_deviation > epsilon + tol || !report.in_range) {
    throw std::logic_error("adversarial batch violates its constraints: max deviation " +
                           std::to_string(report.max_deviation) + " vs epsilon " + std::to_string(epsilon) +
                           (report.in_range ? "" : ", values outside [0, 1]"));
  }
}

#define LFFS_INSTANTIATE_ATTACK(T)                                                                            \
  template std::vector<T> input_gradient(const ForwardFn<T>&, const Tensor<T>&, std::span<const int>);       \
  template Tensor<T> fgsm(const ForwardFn<T>&, const Tensor<T>&, std::span<const int>, double);              \
  template Tensor<T> pgd(const ForwardFn<T>&, const Tensor<T>&, std::span<const int>, const AttackConfig&,   \
                         Rng*);                                                                               \
  template double fooling_rate(const ForwardFn<T>&, std::span<const int>, const Tensor<T>&);                 \
  template BallReport inspect_ball(const Tensor<T>&, const Tensor<T>&);                                       \
  template void require_in_ball(const Tensor<T>&, const Tensor<T>&, double, double);

LFFS_INSTANTIATE_ATTACK(float)
LFFS_INSTANTIATE_ATTACK(double)

}  // namespace lffs
