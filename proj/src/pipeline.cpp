#include "lffs/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace lffs {

namespace {

using Clock = std::chrono::steady_clock;
using ojson = nlohmann::ordered_json;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string to_bytes(const std::vector<std::uint8_t>& bytes) { return std::string(bytes.begin(), bytes.end()); }

void say(const Logger& log, const std::string& message) {
  if (log) log(message);
}

/// Episode time of the first `count` episodes of a report.
double episode_seconds(const EvalReport& report, std::size_t count) {
  double total = 0;
  for (std::size_t i = 0; i < std::min(count, report.episodes.size()); ++i) {
    const auto& e = report.episodes[i];
    total += e.finetune_seconds + e.attack_seconds + e.inference_seconds;
  }
  return total;
}

/// Clean and primary-surface robust aggregates over the first `count` episodes.
std::pair<Aggregate, Aggregate> prefix_aggregates(const EvalReport& report, std::size_t count) {
  std::vector<double> clean, robust;
  for (std::size_t i = 0; i < std::min(count, report.episodes.size()); ++i) {
    clean.push_back(report.episodes[i].clean);
    robust.push_back(report.episodes[i].robust.empty() ? report.episodes[i].clean : report.episodes[i].robust[0]);
  }
  return {aggregate(clean), aggregate(robust)};
}

std::string percent(double v) { return fixed(100.0 * v, 1) + "%"; }

}  // namespace

DataPair generate_data(const ExperimentConfig& config) {
  auto data = generate_synthetic(config.data.generator, config.seeds.data);
  return {std::move(data.base), std::move(data.novel)};
}

std::filesystem::path require_artifact(const std::filesystem::path& path, const std::string& producer) {
  if (!std::filesystem::exists(path)) throw MissingArtifact(path, producer);
  return path;
}

DataPair load_data(const ExperimentConfig& config) {
  std::filesystem::path base, novel;
  std::string producer;
  if (!config.data.base_path.empty()) {
    base = config.data.base_path;
    novel = config.data.novel_path;
  } else {
    base = std::filesystem::path(config.output) / artifact::base;
    novel = std::filesystem::path(config.output) / artifact::novel;
    producer = "gen-data";
  }
  DataPair out{load_dataset(require_artifact(base, producer)), load_dataset(require_artifact(novel, producer))};
  require_disjoint(out.base, out.novel);
  return out;
}

template <typename T>
Student<T> student_from_params(const ModelParams& params) {
  if (params.meta.stage != Stage::student) {
    throw CheckpointError(CheckpointError::Kind::architecture,
                          "expected a student checkpoint, got stage " + to_string(params.meta.stage));
  }
  if (!params.meta.schedule) {
    throw CheckpointError(CheckpointError::Kind::format, "student checkpoint carries no radius schedule");
  }
  Student<T> out{network_from_params<T>(params), final_distribution(*params.meta.schedule), params.meta.schedule};
  out.net.set_bn_mode(BatchNormMode::frozen);
  return out;
}

std::string epoch_log_json(const std::vector<EpochLog>& log) {
  ojson rows = ojson::array();
  for (const auto& e : log) {
    rows.push_back({{"epoch", e.epoch},
                    {"loss", e.loss},
                    {"ce", e.ce},
                    {"freq", e.freq},
                    {"train_accuracy", e.train_accuracy},
                    {"learning_rate", e.learning_rate},
                    {"acc_at_peak", e.acc_at_peak},
                    {"peak_radius", e.peak_radius},
                    {"shifted", e.shifted}});
  }
  return rows.dump(2) + "\n";
}

std::string finetune_trace_json(const std::vector<FinetuneStep>& trace) {
  ojson rows = ojson::array();
  for (const auto& s : trace) {
    rows.push_back({{"epoch", s.epoch}, {"ce", s.ce}, {"entropy", s.entropy}, {"freq", s.freq}, {"radius", s.radius}});
  }
  return rows.dump(2) + "\n";
}

std::string experiment_report_json(const ExperimentConfig& config, const EvalReport& report) {
  ojson doc;
  doc["config"] = to_json(config);
  doc["report"] = report_document(report);
  return doc.dump(2) + "\n";
}

std::vector<LadderRow> ladder_rows(const ExperimentConfig& config) {
  const InferenceMode fixed_r{InferenceKind::fixed_radius, config.claim.ladder_radius};
  return {
      {"vanilla", LadderPretrain::teacher, false, InferenceMode{InferenceKind::plain, 0}},
      {"pretrain_lcs", LadderPretrain::self_fixed, false, fixed_r},
      {"distill", LadderPretrain::distill_fixed, false, fixed_r},
      {"finetune_lcs", LadderPretrain::distill_fixed, true, fixed_r},
      {"full", LadderPretrain::distill_schedule, config.finetune.use_freq_reg, config.eval.inference},
  };
}

std::string format_criterion(const CriterionResult& r) {
  return std::string(r.pass ? "PASS" : "FAIL") + " [" + std::to_string(r.id) + "] " + r.name + ": " + r.detail +
         " (" + fixed(r.seconds, 1) + " s)";
}

template <typename T>
ClaimRun run_claim(const ExperimentConfig& config, const DataPair& data, std::size_t workers, const Logger& log) {
  config.validate();
  ClaimRun run;
  run.rows = ladder_rows(config);
  const PretrainConfig base_pretrain = config.pretrain_config();
  const std::size_t r = config.claim.ladder_radius;

  say(log, "teacher: " + std::to_string(base_pretrain.epochs) + " epochs");
  auto start = Clock::now();
  auto teacher = train_teacher<T>(data.base, config.arch(data.base), base_pretrain);
  run.teacher_seconds = seconds_since(start);
  run.artifacts["teacher.ckpt"] =
      to_bytes(encode_checkpoint(export_params<T>(teacher.net, nullptr, {Stage::teacher, base_pretrain.seed,
                                                                          teacher.net.config(), std::nullopt,
                                                                          std::nullopt})));
  run.artifacts["teacher_log.json"] = epoch_log_json(teacher.log);

  // Students per pretraining variant, built once and shared by rows.
  std::map<LadderPretrain, Student<T>> students;
  std::map<LadderPretrain, double> student_seconds;
  auto student_for = [&](LadderPretrain kind) -> Student<T>& {
    if (auto it = students.find(kind); it != students.end()) return it->second;
    if (kind == LadderPretrain::teacher) {
      Student<T> s{teacher.net.clone(), RadiusDistribution::fixed(r), std::nullopt};
      s.net.set_bn_mode(BatchNormMode::frozen);
      student_seconds[kind] = 0;
      return students.emplace(kind, std::move(s)).first->second;
    }
    PretrainConfig pc = base_pretrain;
    std::string name = "student_schedule";
    if (kind != LadderPretrain::distill_schedule) {
      pc.r_max = pc.r_min = r;
      name = kind == LadderPretrain::self_fixed ? "student_self_fixed" : "student_distill_fixed";
    }
    if (kind == LadderPretrain::self_fixed) {
      pc.freq_source = FreqSource::self;
      // Trained from scratch, so its batchnorm statistics have to be learned.
      pc.student_bn = BatchNormMode::train;
    }
    say(log, name + ": " + std::to_string(pc.epochs) + " epochs, radii " + std::to_string(pc.r_max) + ".." +
                 std::to_string(pc.r_min));
    const auto t0 = Clock::now();
    auto result = distill_student<T>(teacher.net, data.base, pc);
    student_seconds[kind] = seconds_since(t0);
    run.artifacts[name + ".ckpt"] = to_bytes(encode_checkpoint(
        export_params<T>(result.net, nullptr, {Stage::student, pc.seed, result.net.config(), result.schedule, std::nullopt})));
    run.artifacts[name + "_log.json"] = epoch_log_json(result.log);
    Student<T> s{std::move(result.net), std::move(result.weights), std::move(result.schedule)};
    s.net.set_bn_mode(BatchNormMode::frozen);
    return students.emplace(kind, std::move(s)).first->second;
  };

  ojson ladder_doc = ojson::array();
  std::ostringstream csv;
  csv << "row,name,clean_mean,clean_ci95,robust_mean,robust_ci95\n";
  for (std::size_t i = 0; i < run.rows.size(); ++i) {
    const auto& row = run.rows[i];
    const bool first_use = !students.count(row.pretrain);
    Student<T>& student = student_for(row.pretrain);
    run.pretrain_seconds.push_back(first_use ? student_seconds[row.pretrain] : 0.0);

    EvalSettings settings = config.eval_settings(workers);
    settings.finetune.use_freq_reg = row.finetune_freq_reg;
    settings.inference = row.inference;
    settings.attack.target_forward = AttackSurface::plain;
    settings.both_surfaces = false;
    say(log, "row " + std::to_string(i + 1) + " " + row.name + ": " + std::to_string(settings.episodes) + " episodes");
    auto report = evaluate<T>(student.net, student.weights, data.novel, settings, row.name);
    say(log, "  clean " + fixed(report.clean.mean, 4) + " robust " + fixed(report.robust_mean(), 4));

    run.artifacts["report_" + row.name + ".json"] = experiment_report_json(config, report);
    run.artifacts["report_" + row.name + ".csv"] = report_csv(report);
    csv << (i + 1) << ',' << row.name << ',' << fixed(report.clean.mean, 6) << ',' << fixed(report.clean.ci95, 6) << ','
        << fixed(report.robust.front().mean, 6) << ',' << fixed(report.robust.front().ci95, 6) << '\n';
    ladder_doc.push_back({{"row", i + 1},
                          {"name", row.name},
                          {"clean", report.clean.mean},
                          {"robust", report.robust_mean()}});
    run.reports.push_back(std::move(report));
  }
  run.artifacts["ladder.csv"] = csv.str();

  Student<T>& full = student_for(LadderPretrain::distill_schedule);
  const auto& full_row = run.rows.back();
  EvalSettings full_settings = config.eval_settings(workers);
  full_settings.finetune.use_freq_reg = full_row.finetune_freq_reg;
  full_settings.inference = full_row.inference;
  full_settings.both_surfaces = false;

  {
    EvalSettings zero = full_settings;
    zero.episodes = std::min<std::size_t>(2, config.eval.episodes);
    zero.attack.epsilon = 0.0;
    say(log, "full pipeline at epsilon 0: " + std::to_string(zero.episodes) + " episodes");
    run.epsilon_zero = evaluate<T>(full.net, full.weights, data.novel, zero, "full_epsilon_zero");
    run.artifacts["report_full_epsilon_zero.json"] = experiment_report_json(config, run.epsilon_zero);
  }
  if (config.claim.adaptive_episodes > 0) {
    EvalSettings adaptive = full_settings;
    adaptive.episodes = config.claim.adaptive_episodes;
    adaptive.attack.target_forward = AttackSurface::ensemble;
    say(log, "full pipeline, ensemble-surface attack: " + std::to_string(adaptive.episodes) + " episodes");
    run.adaptive = evaluate<T>(full.net, full.weights, data.novel, adaptive, "full_adaptive");
    say(log, "  clean " + fixed(run.adaptive->clean.mean, 4) + " robust " + fixed(run.adaptive->robust_mean(), 4));
    run.artifacts["report_full_adaptive.json"] = experiment_report_json(config, *run.adaptive);
  }

  ojson claim;
  claim["config"] = to_json(config);
  claim["ladder"] = ladder_doc;
  if (run.adaptive) {
    claim["full_adaptive"] = {{"episodes", run.adaptive->episodes.size()},
                              {"clean", run.adaptive->clean.mean},
                              {"robust_ensemble_surface", run.adaptive->robust_mean()}};
  }
  run.artifacts["claim.json"] = claim.dump(2) + "\n";

  ojson timing;
  timing["teacher_seconds"] = run.teacher_seconds;
  ojson rows = ojson::array();
  for (std::size_t i = 0; i < run.rows.size(); ++i) {
    rows.push_back({{"name", run.rows[i].name},
                    {"pretrain_seconds", run.pretrain_seconds[i]},
                    {"eval", nlohmann::ordered_json::parse(timing_json(run.reports[i]))}});
  }
  timing["rows"] = rows;
  if (run.adaptive) timing["full_adaptive"] = nlohmann::ordered_json::parse(timing_json(*run.adaptive));
  run.timing_json = timing.dump(2) + "\n";
  return run;
}

std::vector<std::string> artifact_differences(const ClaimRun& a, const ClaimRun& b) {
  std::vector<std::string> out;
  for (const auto& [name, bytes] : a.artifacts) {
    auto it = b.artifacts.find(name);
    if (it == b.artifacts.end() || it->second != bytes) out.push_back(name);
  }
  for (const auto& [name, bytes] : b.artifacts)
    if (!a.artifacts.count(name)) out.push_back(name);
  return out;
}

std::vector<CriterionResult> judge_claim(const ExperimentConfig& config, const ClaimRun& run, const ClaimRun* repeat) {
  std::vector<CriterionResult> out;
  const auto& vanilla = run.reports.front();
  const auto& full = run.reports.back();
  const double eps = config.attack.epsilon;

  {
    CriterionResult c{5, "attack contract", false, "", 0};
    const std::size_t n = std::min(config.claim.collapse_episodes, vanilla.episodes.size());
    const auto [clean, robust] = prefix_aggregates(vanilla, n);
    double max_dev = 0;
    for (const auto& report : run.reports)
      for (const auto& e : report.episodes) max_dev = std::max(max_dev, e.max_deviation);
    bool zero_identity = !run.epsilon_zero.episodes.empty();
    for (const auto& e : run.epsilon_zero.episodes) zero_identity = zero_identity && e.robust.front() == e.clean;
    const bool in_ball = max_dev <= eps + 1e-7;
    const bool collapsed = robust.mean < config.claim.collapse_ratio * clean.mean;
    c.seconds = run.teacher_seconds + episode_seconds(vanilla, n);
    c.pass = in_ball && zero_identity && collapsed && c.seconds < config.claim.collapse_seconds;
    c.detail = "vanilla over " + std::to_string(n) + " episodes clean " + percent(clean.mean) + ", robust " +
               percent(robust.mean) + " (limit " + percent(config.claim.collapse_ratio * clean.mean) +
               "); max |x_adv-x| " + fixed(max_dev * 255.0, 3) + "/255; epsilon 0 identity " +
               (zero_identity ? "holds" : "broken");
    out.push_back(c);
  }
  {
    CriterionResult c{6, "end-to-end directional claim", false, "", 0};
    const double gain = full.robust_mean() - vanilla.robust_mean();
    const double clean_gap = std::abs(full.clean.mean - vanilla.clean.mean);
    c.seconds = run.teacher_seconds + run.pretrain_seconds.back() + vanilla.total_seconds() + full.total_seconds();
    c.pass = gain >= config.claim.robust_gap && clean_gap <= config.claim.clean_tolerance &&
             c.seconds < config.claim.claim_seconds;
    c.detail = "robust " + percent(vanilla.robust_mean()) + " -> " + percent(full.robust_mean()) + " (gain " +
               percent(gain) + ", need " + percent(config.claim.robust_gap) + "); clean " +
               percent(vanilla.clean.mean) + " -> " + percent(full.clean.mean) + " (|diff| " + percent(clean_gap) +
               ", allow " + percent(config.claim.clean_tolerance) + ")";
    out.push_back(c);
  }
  {
    CriterionResult c{7, "ablation ladder", true, "robust", 0};
    c.seconds = run.teacher_seconds;
    for (std::size_t i = 0; i < run.reports.size(); ++i) {
      c.seconds += run.pretrain_seconds[i] + run.reports[i].total_seconds();
      c.detail += (i ? " | " : " ") + run.rows[i].name + " " + percent(run.reports[i].robust_mean());
    }
    // Rows 1..4 must not decrease; the last row is reported but not ordered.
    for (std::size_t i = 1; i + 1 < run.reports.size(); ++i) {
      if (run.reports[i].robust_mean() < run.reports[i - 1].robust_mean()) c.pass = false;
    }
    c.pass = c.pass && c.seconds < config.claim.ladder_seconds;
    out.push_back(c);
  }
  if (repeat) {
    CriterionResult c{8, "determinism", false, "", 0};
    const auto diff = artifact_differences(run, *repeat);
    c.pass = diff.empty();
    if (diff.empty()) {
      c.detail = std::to_string(run.artifacts.size()) + " artifacts byte-identical across two runs";
    } else {
      c.detail = "differing artifacts:";
      for (const auto& d : diff) c.detail += " " + d;
    }
    out.push_back(c);
  }
  return out;
}

template Student<float> student_from_params(const ModelParams&);
template Student<double> student_from_params(const ModelParams&);
template ClaimRun run_claim<float>(const ExperimentConfig&, const DataPair&, std::size_t, const Logger&);
template ClaimRun run_claim<double>(const ExperimentConfig&, const DataPair&, std::size_t, const Logger&);

}  // namespace lffs
