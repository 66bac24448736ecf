#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lffs/random.hpp"
#include "lffs/tensor.hpp"

namespace lffs {

/// Which forward function the attacker differentiates: the network on the
/// raw input, or the full weighted low-pass ensemble.
enum class AttackSurface { plain, ensemble };
std::string to_string(AttackSurface surface);
AttackSurface attack_surface_from_string(const std::string& name);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  std::size_t iters = 20;
  bool random_start = false;
  AttackSurface target_forward = AttackSurface::plain;

  void validate() const;
};

template <typename T>
using ForwardFn = std::function<Tensor<T>(const Tensor<T>&)>;

/// ∇_x L_ce(forward(x), y) as a plain buffer. Records a graph even under an
/// outer NoGradGuard.
template <typename T>
std::vector<T> input_gradient(const ForwardFn<T>& forward, const Tensor<T>& x, std::span<const int> labels);

/// clip_[0,1](x + ε·sign(∇_x L_ce)).
template <typename T>
Tensor<T> fgsm(const ForwardFn<T>& forward, const Tensor<T>& x, std::span<const int> labels, double epsilon);

/// `iters` signed-gradient ascent steps, each projected onto the l∞ ball of
/// radius ε around x and onto [0,1]. `rng` is only drawn from when
/// random_start is set.
template <typename T>
Tensor<T> pgd(const ForwardFn<T>& forward, const Tensor<T>& x, std::span<const int> labels,
              const AttackConfig& config, Rng* rng = nullptr);

/// Fraction of rows whose argmax under `forward(x_adv)` differs from `clean_pred`.
template <typename T>
double fooling_rate(const ForwardFn<T>& forward, std::span<const int> clean_pred, const Tensor<T>& x_adv);

/// Largest |x_adv − x| and whether every value lies in [0,1]; used to verify
/// attack outputs rather than trust them.
struct BallReport {
  double max_deviation = 0;
  bool in_range = true;
};
template <typename T>
BallReport inspect_ball(const Tensor<T>& x, const Tensor<T>& x_adv);

/// Throws std::logic_error when x_adv leaves the ε-ball (with slack `tol`) or [0,1].
template <typename T>
void require_in_ball(const Tensor<T>& x, const Tensor<T>& x_adv, double epsilon, double tol = 1e-7);

}  // namespace lffs
