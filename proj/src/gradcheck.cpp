#include "lffs/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace lffs {

template <typename T>
double finite_diff_check(const std::function<Tensor<T>()>& loss, Tensor<T> input, T step) {
  const bool had_grad = input.requires_grad();
  input.set_requires_grad(true);
  input.zero_grad();
  loss().backward();
  const auto analytic = input.grad();
  input.zero_grad();
  input.set_requires_grad(had_grad);

  NoGradGuard no_grad;
  double worst = 0.0;
  auto values = input.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + step;
    const double up = static_cast<double>(loss().item());
    values[i] = saved - step;
    const double down = static_cast<double>(loss().item());
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& x, T step) {
  auto leaf = x.detach();
  return finite_diff_check<T>(std::function<Tensor<T>()>([&] { return fn(leaf); }), leaf, step);
}

template double finite_diff_check(const std::function<Tensor<float>()>&, Tensor<float>, float);
template double finite_diff_check(const std::function<Tensor<double>()>&, Tensor<double>, double);
template double finite_diff_check(const std::function<Tensor<float>(const Tensor<float>&)>&, const Tensor<float>&,
                                  float);
template double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                  const Tensor<double>&, double);

}  // namespace lffs
