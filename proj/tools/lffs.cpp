// Command-line front end: one subcommand per pipeline stage plus the
// acceptance experiment. Exit codes: 0 ok, 1 unexpected error, 2 bad config
// or usage, 3 missing or unreadable input, 4 checkpoint/architecture
// mismatch, 5 training or evaluation failure, 6 acceptance criterion failed.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "lffs/acceptance.hpp"
#include "lffs/pipeline.hpp"
#include "lffs/runtime.hpp"

namespace fs = std::filesystem;
using namespace lffs;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kMissing = 3, kMismatch = 4, kRuntime = 5, kCriterion = 6 };

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::optional<int> precision;
  std::optional<std::string> out;
};

void progress(const std::string& line) { std::cerr << line << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DatasetError(DatasetError::Kind::io, "cannot write " + path.string());
}

EpochCallback epoch_printer(const std::string& stage) {
  return [stage](const EpochLog& e) {
    std::ostringstream os;
    os << stage << " epoch " << e.epoch << " loss " << e.loss << " acc " << e.train_accuracy;
    if (e.peak_radius) os << " peak " << e.peak_radius << (e.shifted ? " (shifted)" : "");
    progress(os.str());
  };
}

std::string key_listing() {
  std::ostringstream os;
  os << "Config keys (JSON, nested by the dotted path; unknown keys are rejected):\n";
  for (const auto& k : config_keys()) {
    os << "  " << k.path << " = " << k.default_value;
    if (!k.paper_value.empty()) os << "  [full scale: " << k.paper_value << "]";
    os << "\n      " << k.help << "\n";
  }
  os << "\nExit codes: 0 ok, 1 unexpected error, 2 bad config or usage, 3 missing input,\n"
        "4 checkpoint/architecture mismatch, 5 training or evaluation failure, 6 criterion failed.\n";
  return os.str();
}

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig cfg = opt.config_path.empty() ? default_experiment_config() : load_experiment_config(opt.config_path);
  if (opt.seed) reseed(cfg, *opt.seed);
  if (opt.precision) cfg.precision = *opt.precision;
  if (opt.out) cfg.output = *opt.out;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output);
  return cfg.output;
}

void require_arch(const ConvNetConfig& stored, const ConvNetConfig& wanted, const fs::path& path) {
  if (stored == wanted) return;
  auto describe = [](const ConvNetConfig& a) {
    return std::to_string(a.in_channels) + "x" + std::to_string(a.side) + "x" + std::to_string(a.side) + ", width " +
           std::to_string(a.width) + ", " + std::to_string(a.num_classes) + " classes";
  };
  throw CheckpointError(CheckpointError::Kind::architecture, path.string() + " holds a " + describe(stored) +
                                                                 " network, config and data ask for " + describe(wanted));
}

ModelParams load_stage(const fs::path& path, const std::string& producer, Stage stage) {
  auto params = load_checkpoint(require_artifact(path, producer));
  if (params.meta.stage != stage) {
    throw CheckpointError(CheckpointError::Kind::architecture, path.string() + " is a " + to_string(params.meta.stage) +
                                                                   " checkpoint, expected " + to_string(stage));
  }
  return params;
}

int gen_data(const ExperimentConfig& cfg) {
  const auto dir = out_dir(cfg);
  const auto data = generate_data(cfg);
  save_dataset(data.base, dir / artifact::base);
  save_dataset(data.novel, dir / artifact::novel);
  std::cout << "wrote " << (dir / artifact::base).string() << " (" << data.base.size() << " images, "
            << data.base.class_count << " classes) and " << (dir / artifact::novel).string() << " ("
            << data.novel.size() << " images, " << data.novel.class_count << " classes)\n";
  return kOk;
}

template <typename T>
int pretrain(const ExperimentConfig& cfg) {
  const auto dir = out_dir(cfg);
  const auto data = load_data(cfg);
  const auto pc = cfg.pretrain_config();
  auto teacher = train_teacher<T>(data.base, cfg.arch(data.base), pc, epoch_printer("teacher"));
  save_checkpoint(export_params<T>(teacher.net, nullptr, {Stage::teacher, pc.seed, teacher.net.config(), std::nullopt,
                                                          std::nullopt}),
                  dir / artifact::teacher);
  write_text(dir / "teacher_log.json", epoch_log_json(teacher.log));
  std::cout << "wrote " << (dir / artifact::teacher).string() << "\n";
  return kOk;
}

template <typename T>
int distill(const ExperimentConfig& cfg) {
  const auto dir = out_dir(cfg);
  const auto data = load_data(cfg);
  const auto path = dir / artifact::teacher;
  const auto params = load_stage(path, "pretrain", Stage::teacher);
  require_arch(params.meta.arch, cfg.arch(data.base), path);
  const auto teacher = network_from_params<T>(params);
  const auto pc = cfg.pretrain_config();
  auto student = distill_student<T>(teacher, data.base, pc, epoch_printer("student"));
  save_checkpoint(export_params<T>(student.net, nullptr, {Stage::student, pc.seed, student.net.config(),
                                                          student.schedule, std::nullopt}),
                  dir / artifact::student);
  write_text(dir / "student_log.json", epoch_log_json(student.log));
  std::cout << "wrote " << (dir / artifact::student).string() << " (final peak radius "
            << student.schedule.peak_radius() << ")\n";
  return kOk;
}

template <typename T>
Student<T> load_student(const ExperimentConfig& cfg, const DataPair& data) {
  const auto path = fs::path(cfg.output) / artifact::student;
  const auto params = load_stage(path, "distill", Stage::student);
  require_arch(params.meta.arch, cfg.arch(data.base), path);
  return student_from_params<T>(params);
}

template <typename T>
int finetune(const ExperimentConfig& cfg, std::size_t workers) {
  const auto dir = out_dir(cfg);
  const auto data = load_data(cfg);
  auto student = load_student<T>(cfg, data);
  const auto settings = cfg.eval_settings(workers);
  settings.episode.validate();
  // Same episode and finetuning stream the evaluator uses for this index.
  const std::uint64_t episode_seed = derive_seed(settings.seed, cfg.finetune_episode);
  Rng rng(episode_seed);
  const auto shots = settings.episode.shot_counts();
  const auto sampled = sample_episode(data.novel, settings.episode.ways, shots, settings.episode.queries, rng);
  FinetuneConfig ft = settings.finetune;
  ft.seed = derive_seed(episode_seed, 1);
  auto tuned = finetune_episode<T>(student.net, sampled.episode, student.weights, ft);
  save_checkpoint(export_params<T>(tuned.model.backbone, &tuned.model.head,
                                   {Stage::finetuned, ft.seed, tuned.model.backbone.config(), student.schedule,
                                    static_cast<float>(tuned.model.head.scale)}),
                  dir / artifact::finetuned);
  write_text(dir / "finetune_trace.json", finetune_trace_json(tuned.trace));
  std::cout << "wrote " << (dir / artifact::finetuned).string() << " (episode " << cfg.finetune_episode << ")\n";
  return kOk;
}

template <typename T>
int evaluate_stage(const ExperimentConfig& cfg, std::size_t workers, bool attack) {
  const auto dir = out_dir(cfg);
  const auto data = load_data(cfg);
  auto student = load_student<T>(cfg, data);
  auto settings = cfg.eval_settings(workers);
  settings.attack_enabled = attack;
  if (attack && cfg.dump_adversarial) {
    settings.adversarial_dir = dir / "adversarial";
    fs::create_directories(settings.adversarial_dir);
  }
  const std::string prefix = attack ? "attack_" : "";
  const auto report = evaluate<T>(student.net, student.weights, data.novel, settings, attack ? "attack-eval" : "eval");
  write_text(dir / (prefix + "report.json"), experiment_report_json(cfg, report));
  write_text(dir / (prefix + "report.csv"), report_csv(report));
  write_text(dir / (prefix + "timing.json"), timing_json(report));
  if (!attack && cfg.export_features) export_features<T>(student.net, data.novel.images, dir / "features.fsds", data.novel.labels);
  std::cout << "clean " << report.clean.mean << " +- " << report.clean.ci95;
  for (std::size_t s = 0; s < report.surfaces.size(); ++s) {
    std::cout << ", robust (" << to_string(report.surfaces[s]) << ") " << report.robust[s].mean << " +- "
              << report.robust[s].ci95;
  }
  std::cout << " over " << report.episodes.size() << " episodes; wrote " << (dir / (prefix + "report.json")).string()
            << "\n";
  return kOk;
}

int reproduce_claim(const ExperimentConfig& cfg, std::size_t workers) {
  out_dir(cfg);
  bool all = true;
  run_acceptance(
      cfg, workers,
      [&](const CriterionResult& r) {
        all = all && r.pass;
        std::cout << format_criterion(r) << std::endl;
      },
      progress);
  return all ? kOk : kCriterion;
}

template <typename T>
int dispatch(const std::string& command, const ExperimentConfig& cfg, std::size_t workers) {
  if (command == "pretrain") return pretrain<T>(cfg);
  if (command == "distill") return distill<T>(cfg);
  if (command == "finetune") return finetune<T>(cfg, workers);
  if (command == "eval") return evaluate_stage<T>(cfg, workers, false);
  if (command == "attack-eval") return evaluate_stage<T>(cfg, workers, true);
  throw std::logic_error("unknown command " + command);
}

int fail(int code, const char* kind, const std::string& message) {
  std::cerr << "error [" << kind << "]: " << message << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"lffs: low-pass frequency regularized few-shot pipeline stages and the desk experiment"};
  app.footer(key_listing());
  app.require_subcommand(1, 1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config_path, "experiment config (JSON); defaults apply to absent keys");
  app.add_option("--seed", opt.seed, "master seed; replaces seeds.data, seeds.pretrain and seeds.eval");
  app.add_option("--workers", opt.workers, "episode worker threads")->check(CLI::PositiveNumber);
  app.add_option("--precision", opt.precision, "floating point bits")->check(CLI::IsMember({32, 64}));
  app.add_option("--out", opt.out, "output directory (overrides the config's output)");

  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "generate the synthetic base and novel sets"},
      {"pretrain", "train the teacher on the base set"},
      {"distill", "distill the student from the teacher under the radius schedule"},
      {"finetune", "finetune the student on one episode and save it"},
      {"eval", "clean few-shot evaluation of the student"},
      {"attack-eval", "clean and adversarial few-shot evaluation of the student"},
      {"reproduce-claim", "run every acceptance check and the desk experiment, PASS/FAIL per criterion"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const auto cfg = resolve(opt);
    if (command == "gen-data") return gen_data(cfg);
    if (command == "reproduce-claim") return reproduce_claim(cfg, opt.workers);
    return cfg.precision == 64 ? dispatch<double>(command, cfg, opt.workers) : dispatch<float>(command, cfg, opt.workers);
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const MissingArtifact& e) {
    return fail(kMissing, "missing-input", e.what());
  } catch (const CheckpointError& e) {
    if (e.kind() == CheckpointError::Kind::io) return fail(kMissing, "missing-input", e.what());
    return fail(kMismatch, "checkpoint", e.what());
  } catch (const DatasetError& e) {
    switch (e.kind()) {
      case DatasetError::Kind::io:
      case DatasetError::Kind::format: return fail(kMissing, "dataset", e.what());
      case DatasetError::Kind::insufficient: return fail(kConfig, "dataset", e.what());
      case DatasetError::Kind::invariant: return fail(kRuntime, "dataset", e.what());
    }
  } catch (const TrainingDiverged& e) {
    return fail(kRuntime, "diverged", e.what());
  } catch (const EpisodeFailed& e) {
    return fail(kRuntime, "episode", e.what());
  } catch (const std::exception& e) {
    return fail(kOther, "internal", e.what());
  }
  return kOther;
}
