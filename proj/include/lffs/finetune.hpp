#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lffs/episodes.hpp"
#include "lffs/model.hpp"
#include "lffs/optim.hpp"
#include "lffs/pretrain.hpp"
#include "lffs/schedule.hpp"

namespace lffs {

/// Which samples the frequency-consistency term is computed on.
enum class RegTarget { query, support, both };
std::string to_string(RegTarget target);
RegTarget reg_target_from_string(const std::string& name);

struct FinetuneConfig {
  std::size_t epochs = 25;
  OptimizerConfig optimizer{OptimizerKind::adam, 5e-5, 0.9, 0.0, 0.9, 0.999, 1e-8, LrSchedule::constant, 25};
  bool use_entropy = true;
  bool use_freq_reg = true;
  RegTarget freq_reg_target = RegTarget::query;
  FreqLoss freq_loss = FreqLoss::cosine;
  /// frozen keeps batchnorm statistics and affine parameters fixed; eval
  /// keeps the statistics but lets the affine parameters train.
  BatchNormMode bn_mode = BatchNormMode::frozen;
  double head_scale = 10.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FinetuneStep {
  std::size_t epoch = 0;
  double ce = 0;
  double entropy = 0;
  /// Cosine similarity (or KL) between filtered and unfiltered branches; 0 when off.
  double freq = 0;
  std::size_t radius = 0;
};

template <typename T>
struct FinetuneResult {
  FewShotModel<T> model;
  std::vector<FinetuneStep> trace;
};

/// Attaches a cosine head initialized from support means on top of a copy of
/// `student` and finetunes the whole network with
///   L_ce(support) [+ L_e(query)] [+ frequency penalty on the chosen target],
/// one full-episode step per epoch, radius drawn from `weights` each step.
/// Query labels are not part of Episode and cannot be consulted here.
template <typename T>
FinetuneResult<T> finetune_episode(const ConvNet<T>& student, const Episode& episode,
                                   const RadiusDistribution& weights, const FinetuneConfig& config);

}  // namespace lffs
