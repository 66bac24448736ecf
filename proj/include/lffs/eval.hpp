#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lffs/attack.hpp"
#include "lffs/episodes.hpp"
#include "lffs/finetune.hpp"
#include "lffs/model.hpp"
#include "lffs/schedule.hpp"

namespace lffs {

/// Σ_r w_r · forward(low_pass(x, r)) over the distribution's radii.
/// Differentiable in x; zero-weight radii are skipped.
template <typename T>
Tensor<T> ensemble_logits(const ForwardFn<T>& forward, const Tensor<T>& x, const RadiusDistribution& weights);

/// How predictions are formed from a finetuned model.
enum class InferenceKind { plain, fixed_radius, ensemble };
std::string to_string(InferenceKind kind);
InferenceKind inference_kind_from_string(const std::string& name);

struct InferenceMode {
  InferenceKind kind = InferenceKind::ensemble;
  std::size_t radius = 2;  // fixed_radius only
};

/// Forward used for predictions under `mode`; `weights` feeds the ensemble.
template <typename T>
ForwardFn<T> inference_forward(FewShotModel<T>& model, const InferenceMode& mode, const RadiusDistribution& weights);

/// Forward the attacker differentiates: plain is the model on the raw input,
/// ensemble is the full inference path of `mode`.
template <typename T>
ForwardFn<T> attack_forward(FewShotModel<T>& model, AttackSurface surface, const InferenceMode& mode,
                            const RadiusDistribution& weights);

struct EpisodeSpec {
  std::size_t ways = 5;
  /// Balanced shots per class, unless per_class_shots is non-empty.
  std::size_t shots = 1;
  std::vector<std::size_t> per_class_shots;
  std::size_t queries = 15;

  std::vector<std::size_t> shot_counts() const;
  void validate() const;
};

struct EvalSettings {
  std::size_t episodes = 50;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  EpisodeSpec episode;
  FinetuneConfig finetune;
  AttackConfig attack;
  InferenceMode inference;
  /// Also attack the other surface and report it beside the primary one.
  bool both_surfaces = false;
  /// Off: clean accuracy only, no surfaces in the report.
  bool attack_enabled = true;
  /// When set, each episode's adversarial query batch is written here as
  /// adv_<episode>_<surface>.fsds (split tag novel, episode labels).
  std::filesystem::path adversarial_dir;
};

struct EpisodeResult {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  double clean = 0;
  /// Robust accuracy per attacked surface, primary first.
  std::vector<double> robust;
  double fooling_rate = 0;
  double max_deviation = 0;
  double finetune_seconds = 0;
  double attack_seconds = 0;
  double inference_seconds = 0;
};

/// A failed episode aborts the run; the message names its index and seed.
class EpisodeFailed : public std::runtime_error {
 public:
  EpisodeFailed(std::size_t index, std::uint64_t seed, const std::string& what)
      : std::runtime_error("episode " + std::to_string(index) + " (seed " + std::to_string(seed) + ") failed: " + what),
        index_(index),
        seed_(seed) {}
  std::size_t index() const { return index_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::size_t index_;
  std::uint64_t seed_;
};

struct Aggregate {
  double mean = 0;
  /// 1.96 · sample standard deviation / √n; 0 for a single episode.
  double ci95 = 0;
};
Aggregate aggregate(std::span<const double> values);

struct EvalReport {
  std::string label;
  std::vector<AttackSurface> surfaces;
  std::vector<EpisodeResult> episodes;
  Aggregate clean;
  std::vector<Aggregate> robust;
  EvalSettings settings;
  std::size_t weights_size = 0;

  double robust_mean() const { return robust.empty() ? 0.0 : robust.front().mean; }
  double total_seconds() const;
};

template <typename T>
EvalReport evaluate(const ConvNet<T>& student, const RadiusDistribution& weights, const Dataset& novel,
                    const EvalSettings& settings, const std::string& label = "");

/// Deterministic report content (no timing).
nlohmann::ordered_json report_document(const EvalReport& report);
std::string report_json(const EvalReport& report, int indent = 2);
std::string report_csv(const EvalReport& report);
/// Wall-clock timing only; kept apart so reports stay byte-reproducible.
std::string timing_json(const EvalReport& report, int indent = 2);

/// Writes forward_features of `net` on `images` as an FSDS file with C = F,
/// H = W = 1 and split tag `features`. Labels are written when given, else 0.
template <typename T>
void export_features(ConvNet<T>& net, const ImageBatch& images, const std::filesystem::path& path,
                     std::span<const int> labels = {});

}  // namespace lffs
