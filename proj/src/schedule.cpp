#include "lffs/schedule.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace lffs {

void RadiusDistribution::validate() const {
  if (radii.empty() || radii.size() != weights.size()) {
    throw std::invalid_argument("radius distribution: radii and weights must be non-empty and equal length");
  }
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw std::invalid_argument("radius distribution: negative or non-finite weight");
    total += w;
  }
  if (!(total > 0)) throw std::invalid_argument("radius distribution: weights sum to zero");
}

std::size_t RadiusDistribution::sample(Rng& rng) const {
  if (radii.size() == 1) return radii.front();
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  return radii[pick(rng)];
}

RadiusDistribution RadiusDistribution::fixed(std::size_t radius) { return {{radius}, {1.0}}; }

RadiusDistribution RadiusDistribution::uniform(std::size_t r_max, std::size_t r_min) {
  if (r_max < r_min) throw std::invalid_argument("uniform radius distribution: r_max < r_min");
  RadiusDistribution out;
  for (std::size_t r = r_max + 1; r-- > r_min;) {
    out.radii.push_back(r);
    out.weights.push_back(1.0 / static_cast<double>(r_max - r_min + 1));
  }
  return out;
}

std::vector<double> long_tail_weights(std::size_t count, std::size_t peak_index, double lambda) {
  std::vector<double> w(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double distance = i > peak_index ? static_cast<double>(i - peak_index) : static_cast<double>(peak_index - i);
    w[i] = std::pow(lambda, distance);
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= total;
  return w;
}

RadiusSchedule schedule_at_peak(std::size_t r_max, std::size_t r_min, double lambda, double threshold,
                                std::size_t peak_index) {
  if (r_min < 1 || r_max < r_min) {
    throw std::invalid_argument("radius schedule: need r_max >= r_min >= 1, got r_max=" + std::to_string(r_max) +
                                " r_min=" + std::to_string(r_min));
  }
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw std::invalid_argument("radius schedule: lambda must lie in (0, 1), got " + std::to_string(lambda));
  }
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("radius schedule: threshold must lie in (0, 1], got " + std::to_string(threshold));
  }
  RadiusSchedule s;
  s.r_max = r_max;
  s.r_min = r_min;
  s.lambda = lambda;
  s.threshold = threshold;
  if (peak_index >= s.size()) throw std::invalid_argument("radius schedule: peak index outside the radius range");
  s.peak_index = peak_index;
  s.weights = long_tail_weights(s.size(), peak_index, lambda);
  return s;
}

RadiusSchedule init_schedule(std::size_t r_max, std::size_t r_min, double lambda, double threshold) {
  return schedule_at_peak(r_max, r_min, lambda, threshold, 0);
}

std::size_t sample_radius(const RadiusSchedule& schedule, Rng& rng) {
  return final_distribution(schedule).sample(rng);
}

RadiusSchedule maybe_shift(const RadiusSchedule& schedule, double acc_at_peak) {
  if (acc_at_peak < schedule.threshold || schedule.at_floor()) return schedule;
  return schedule_at_peak(schedule.r_max, schedule.r_min, schedule.lambda, schedule.threshold,
                          schedule.peak_index + 1);
}

RadiusDistribution final_distribution(const RadiusSchedule& schedule) {
  RadiusDistribution out;
  out.weights = schedule.weights;
  for (std::size_t i = 0; i < schedule.size(); ++i) out.radii.push_back(schedule.radius_at(i));
  return out;
}

}  // namespace lffs
