#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lffs/checkpoint.hpp"
#include "lffs/experiment.hpp"

namespace lffs {

/// An upstream artifact (dataset, checkpoint) a stage needs is not there.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& producer)
      : std::runtime_error("missing " + path.string() + (producer.empty() ? "" : " (produced by " + producer + ")")),
        path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

using Logger = std::function<void(const std::string&)>;

struct DataPair {
  Dataset base;
  Dataset novel;
};

DataPair generate_data(const ExperimentConfig& config);
/// data.base_path/novel_path when set, else <output>/base.fsds and novel.fsds.
/// Checks split tags and disjointness.
DataPair load_data(const ExperimentConfig& config);

/// File names of the stage artifacts under the output directory.
namespace artifact {
inline constexpr const char* base = "base.fsds";
inline constexpr const char* novel = "novel.fsds";
inline constexpr const char* teacher = "teacher.ckpt";
inline constexpr const char* student = "student.ckpt";
inline constexpr const char* finetuned = "finetuned.ckpt";
}  // namespace artifact

std::filesystem::path require_artifact(const std::filesystem::path& path, const std::string& producer);

template <typename T>
struct Student {
  ConvNet<T> net;
  RadiusDistribution weights;
  std::optional<RadiusSchedule> schedule;
};

/// Student network and its final radius distribution from a student checkpoint.
template <typename T>
Student<T> student_from_params(const ModelParams& params);

std::string epoch_log_json(const std::vector<EpochLog>& log);
std::string finetune_trace_json(const std::vector<FinetuneStep>& trace);

/// {"config": resolved config, "report": report_document}.
std::string experiment_report_json(const ExperimentConfig& config, const EvalReport& report);

/// How a ladder row's student is pretrained.
enum class LadderPretrain {
  teacher,         // cross-entropy only; the teacher itself
  self_fixed,      // from scratch, S(low_pass(x, r)) matched to S(x), fixed r
  distill_fixed,   // from the teacher, matched to T(x), fixed r
  distill_schedule // from the teacher, radius from the progressive schedule
};

struct LadderRow {
  std::string name;
  LadderPretrain pretrain = LadderPretrain::teacher;
  bool finetune_freq_reg = false;
  InferenceMode inference;
};

/// vanilla, +pretrain L_cs, +T→S distillation, +finetune L_cs, +PL/ensemble.
std::vector<LadderRow> ladder_rows(const ExperimentConfig& config);

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};
std::string format_criterion(const CriterionResult& result);

struct ClaimRun {
  std::vector<LadderRow> rows;
  std::vector<EvalReport> reports;  // one per row
  std::vector<double> pretrain_seconds;
  double teacher_seconds = 0;
  std::optional<EvalReport> adaptive;
  /// Full pipeline with ε = 0; robust must equal clean.
  EvalReport epsilon_zero;
  /// File name → bytes of every deterministic output.
  std::map<std::string, std::string> artifacts;
  /// Wall-clock figures; not part of `artifacts`.
  std::string timing_json;
};

template <typename T>
ClaimRun run_claim(const ExperimentConfig& config, const DataPair& data, std::size_t workers, const Logger& log = {});

/// Criteria 5–7 from one run, 8 from the comparison when `repeat` is given.
std::vector<CriterionResult> judge_claim(const ExperimentConfig& config, const ClaimRun& run, const ClaimRun* repeat);

/// Names of artifacts that differ (or exist in only one run).
std::vector<std::string> artifact_differences(const ClaimRun& a, const ClaimRun& b);

}  // namespace lffs
