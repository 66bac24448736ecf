#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lffs/episodes.hpp"
#include "lffs/model.hpp"
#include "lffs/optim.hpp"
#include "lffs/schedule.hpp"

namespace lffs {

enum class FreqLoss { cosine, kl };
std::string to_string(FreqLoss loss);
FreqLoss freq_loss_from_string(const std::string& name);

/// Where the regularization target logits come from during pretraining:
/// a frozen teacher on the original batch, or the network itself.
enum class FreqSource { teacher, self };
std::string to_string(FreqSource source);
FreqSource freq_source_from_string(const std::string& name);

/// Frequency regularization term added to the objective. For cosine this is
/// −cosine_similarity(low, target); for kl it is KL(softmax(target) ‖ softmax(low)).
template <typename T>
Tensor<T> frequency_penalty(const Tensor<T>& low_logits, const Tensor<T>& target_logits, FreqLoss loss);

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer{OptimizerKind::sgd_momentum, 1e-2, 0.9, 5e-4, 0.9, 0.999, 1e-8, LrSchedule::cosine, 20};
  std::size_t r_max = 16;
  std::size_t r_min = 2;
  double lambda = 0.8;
  double threshold = 0.98;
  FreqLoss freq_loss = FreqLoss::cosine;
  FreqSource freq_source = FreqSource::teacher;
  /// Batchnorm handling of the distilled network.
  BatchNormMode student_bn = BatchNormMode::frozen;
  /// Samples used for the per-epoch accuracy test at the peak radius.
  std::size_t shift_subset = 2048;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;
  double ce = 0;
  double freq = 0;
  double train_accuracy = 0;
  double learning_rate = 0;
  /// Distillation only: accuracy at the peak radius and the peak after the shift test.
  double acc_at_peak = 0;
  std::size_t peak_radius = 0;
  bool shifted = false;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& stage, std::size_t epoch, std::size_t step)
      : std::runtime_error(stage + ": loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step)),
        epoch_(epoch),
        step_(step) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t epoch_, step_;
};

using EpochCallback = std::function<void(const EpochLog&)>;

template <typename T>
struct TeacherResult {
  ConvNet<T> net;
  std::vector<EpochLog> log;
};

/// Cross-entropy training from a seeded initialization.
template <typename T>
TeacherResult<T> train_teacher(const Dataset& base, const ConvNetConfig& arch, const PretrainConfig& config,
                               const EpochCallback& on_epoch = {});

template <typename T>
struct StudentResult {
  ConvNet<T> net;
  RadiusSchedule schedule;
  RadiusDistribution weights;
  std::vector<EpochLog> log;
};

/// Teacher source: the student starts as a copy of the teacher and minimizes
/// L_ce(S(x)) plus the frequency penalty between S(low_pass(x, r)) and the
/// detached T(x), r drawn from the radius schedule each minibatch. Self
/// source: `teacher` only supplies the architecture; the network starts from
/// a seeded initialization and matches S(low_pass(x, r)) to S(x).
/// The teacher is never modified.
template <typename T>
StudentResult<T> distill_student(const ConvNet<T>& teacher, const Dataset& base, const PretrainConfig& config,
                                 const EpochCallback& on_epoch = {});

/// Accuracy of `net` on low_pass(images, radius) (radius 0: unfiltered),
/// evaluated without graph recording in chunks.
template <typename T>
double filtered_accuracy(ConvNet<T>& net, const ImageBatch& images, std::span<const int> labels, std::size_t radius);

}  // namespace lffs
