#include "lffs/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lffs {

double cosine_annealed_rate(double base, std::size_t epoch, std::size_t total) {
  if (total == 0) return base;
  const double progress = static_cast<double>(std::min(epoch, total)) / static_cast<double>(total);
  return base * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd-momentum";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd-momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd-momentum or adam)");
}

std::string to_string(LrSchedule schedule) { return schedule == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule lr_schedule_from_string(const std::string& name) {
  if (name == "cosine") return LrSchedule::cosine;
  if (name == "constant") return LrSchedule::constant;
  throw std::invalid_argument("unknown learning-rate schedule '" + name + "' (expected constant or cosine)");
}

template <typename T>
Optimizer<T>::Optimizer(std::vector<Tensor<T>> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config), lr_(config.learning_rate) {
  if (!(config_.learning_rate > 0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  first_.resize(params_.size());
  second_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    first_[i].assign(params_[i].numel(), T(0));
    if (config_.kind == OptimizerKind::adam) second_[i].assign(params_[i].numel(), T(0));
  }
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Optimizer<T>::set_epoch(std::size_t epoch) {
  lr_ = config_.schedule == LrSchedule::cosine
            ? cosine_annealed_rate(config_.learning_rate, epoch, config_.total_epochs)
            : config_.learning_rate;
}

template <typename T>
void Optimizer<T>::step() {
  ++steps_;
  const T lr = static_cast<T>(lr_);
  const T wd = static_cast<T>(config_.weight_decay);
  if (config_.kind == OptimizerKind::sgd_momentum) {
    const T mu = static_cast<T>(config_.momentum);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      auto w = params_[i].data();
      const auto& g = params_[i].node()->grad;
      auto& v = first_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = g[j] + wd * w[j];
        v[j] = mu * v[j] + gj;
        w[j] -= lr * v[j];
      }
    }
    return;
  }

  const double b1 = config_.beta1, b2 = config_.beta2;
  const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(steps_)));
  const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(steps_)));
  const T eps = static_cast<T>(config_.adam_eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    auto w = params_[i].data();
    const auto& g = params_[i].node()->grad;
    auto& m = first_[i];
    auto& v = second_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g[j] + wd * w[j];
      m[j] = T(b1) * m[j] + T(1 - b1) * gj;
      v[j] = T(b2) * v[j] + T(1 - b2) * gj * gj;
      const T mhat = m[j] / c1, vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace lffs
