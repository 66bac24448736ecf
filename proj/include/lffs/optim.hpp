#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lffs/tensor.hpp"

namespace lffs {

enum class OptimizerKind { sgd_momentum, adam };
enum class LrSchedule { constant, cosine };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LrSchedule schedule = LrSchedule::constant;
  std::size_t total_epochs = 1;  // annealing horizon for LrSchedule::cosine
};

/// lr·(1 + cos(π·epoch/total))/2, clamped to the [0, total] horizon.
double cosine_annealed_rate(double base, std::size_t epoch, std::size_t total);

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);
std::string to_string(LrSchedule schedule);
LrSchedule lr_schedule_from_string(const std::string& name);

/// SGD with heavy-ball momentum or Adam over a fixed parameter list.
/// Adam's bias correction counts steps, not epochs.
template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<Tensor<T>> params, OptimizerConfig config);

  void zero_grad();
  void step();
  /// Applies the schedule for the given epoch.
  void set_epoch(std::size_t epoch);

  double learning_rate() const { return lr_; }
  std::size_t step_count() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  std::vector<Tensor<T>> params_;
  OptimizerConfig config_;
  double lr_;
  std::size_t steps_ = 0;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
};

}  // namespace lffs
