#pragma once

#include <cstddef>
#include <vector>

#include "lffs/random.hpp"

namespace lffs {

/// Normalized weights over a set of filter radii.
struct RadiusDistribution {
  std::vector<std::size_t> radii;
  std::vector<double> weights;

  /// Throws std::invalid_argument unless weights are positive-sum,
  /// nonnegative, and match the radii.
  void validate() const;
  std::size_t sample(Rng& rng) const;

  static RadiusDistribution fixed(std::size_t radius);
  static RadiusDistribution uniform(std::size_t r_max, std::size_t r_min);
};

/// Progressive-learning curriculum over r_range = [r_max, r_max-1, ..., r_min].
/// The peak starts at r_max and only moves toward r_min.
struct RadiusSchedule {
  std::size_t r_max = 16;
  std::size_t r_min = 2;
  double lambda = 0.8;
  double threshold = 0.98;
  std::size_t peak_index = 0;
  std::vector<double> weights;

  std::size_t size() const { return r_max - r_min + 1; }
  std::size_t radius_at(std::size_t index) const { return r_max - index; }
  std::size_t peak_radius() const { return radius_at(peak_index); }
  bool at_floor() const { return peak_radius() == r_min; }
};

/// Normalized λ^|i - peak| over `count` slots. With the peak at slot 0 this
/// is the plain λ^i long tail.
std::vector<double> long_tail_weights(std::size_t count, std::size_t peak_index, double lambda);

RadiusSchedule init_schedule(std::size_t r_max, std::size_t r_min, double lambda, double threshold);

/// Rebuilds a schedule at a given peak, e.g. from checkpoint metadata.
RadiusSchedule schedule_at_peak(std::size_t r_max, std::size_t r_min, double lambda, double threshold,
                                std::size_t peak_index);

std::size_t sample_radius(const RadiusSchedule& schedule, Rng& rng);

/// Moves the peak one radius lower when acc_at_peak >= threshold and the
/// peak is above r_min; returns the schedule unchanged otherwise.
RadiusSchedule maybe_shift(const RadiusSchedule& schedule, double acc_at_peak);

RadiusDistribution final_distribution(const RadiusSchedule& schedule);

}  // namespace lffs
