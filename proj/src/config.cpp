#include <fstream>
#include <sstream>
#include <type_traits>

#include "lffs/experiment.hpp"

namespace lffs {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string bn_name(BatchNormMode mode) {
  switch (mode) {
    case BatchNormMode::train: return "train";
    case BatchNormMode::eval: return "eval";
    case BatchNormMode::frozen: return "frozen";
  }
  return "unknown";
}

BatchNormMode bn_from_name(const std::string& name) {
  if (name == "train") return BatchNormMode::train;
  if (name == "eval") return BatchNormMode::eval;
  if (name == "frozen") return BatchNormMode::frozen;
  throw std::invalid_argument("unknown batchnorm mode '" + name + "' (expected train, eval or frozen)");
}

[[noreturn]] void bad_type(const std::string& path, const char* expected, const json& j) {
  throw ConfigError("config key '" + path + "': expected " + expected + ", got " + j.dump());
}

template <typename V>
V decode(const json& j, const std::string& path) {
  if constexpr (std::is_same_v<V, bool>) {
    if (!j.is_boolean()) bad_type(path, "true or false", j);
    return j.get<bool>();
  } else if constexpr (std::is_same_v<V, int>) {
    if (!j.is_number_integer()) bad_type(path, "an integer", j);
    return j.get<int>();
  } else if constexpr (std::is_unsigned_v<V>) {
    if (!j.is_number_unsigned()) bad_type(path, "a non-negative integer", j);
    return j.get<V>();
  } else if constexpr (std::is_floating_point_v<V>) {
    if (!j.is_number()) bad_type(path, "a number", j);
    return j.get<V>();
  } else if constexpr (std::is_same_v<V, std::string>) {
    if (!j.is_string()) bad_type(path, "a string", j);
    return j.get<std::string>();
  } else {
    static_assert(std::is_same_v<V, std::vector<std::size_t>>);
    if (!j.is_array()) bad_type(path, "an array of non-negative integers", j);
    V out;
    for (const auto& v : j) {
      if (!v.is_number_unsigned()) bad_type(path, "an array of non-negative integers", j);
      out.push_back(v.get<std::size_t>());
    }
    return out;
  }
}

struct KeyDef {
  std::string path;
  std::string paper;
  std::string help;
  std::function<ojson(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const json&)> set;
};

// Access lambdas take a mutable config; get() only reads through them.
template <typename Access>
KeyDef key(std::string path, Access access, std::string help, std::string paper = "") {
  using V = std::remove_cvref_t<decltype(access(std::declval<ExperimentConfig&>()))>;
  return {path, std::move(paper), std::move(help),
          [access](const ExperimentConfig& c) { return ojson(access(const_cast<ExperimentConfig&>(c))); },
          [access, path](ExperimentConfig& c, const json& j) { access(c) = decode<V>(j, path); }};
}

template <typename Access, typename ToName, typename FromName>
KeyDef choice(std::string path, Access access, ToName to_name, FromName from_name, std::string help,
              std::string paper = "") {
  return {path, std::move(paper), std::move(help),
          [access, to_name](const ExperimentConfig& c) {
            return ojson(to_name(access(const_cast<ExperimentConfig&>(c))));
          },
          [access, from_name, path](ExperimentConfig& c, const json& j) {
            const auto name = decode<std::string>(j, path);
            try {
              access(c) = from_name(name);
            } catch (const std::invalid_argument& e) {
              throw ConfigError("config key '" + path + "': " + e.what());
            }
          }};
}

#define LFFS_FIELD(member) [](ExperimentConfig& c) -> auto& { return c.member; }

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = [] {
    auto kind_name = [](InferenceKind k) { return to_string(k); };
    auto surface_name = [](AttackSurface s) { return to_string(s); };
    auto loss_name = [](FreqLoss l) { return to_string(l); };
    auto source_name = [](FreqSource s) { return to_string(s); };
    auto target_name = [](RegTarget t) { return to_string(t); };
    return std::vector<KeyDef>{
        key("data.classes", LFFS_FIELD(data.generator.classes), "total synthetic classes, base plus novel"),
        key("data.novel_classes", LFFS_FIELD(data.generator.novel_classes), "classes held out for episodes"),
        key("data.per_class", LFFS_FIELD(data.generator.per_class), "images per class"),
        key("data.side", LFFS_FIELD(data.generator.side), "image side, a multiple of 16"),
        key("data.channels", LFFS_FIELD(data.generator.channels), "image channels"),
        key("data.signal_radius", LFFS_FIELD(data.generator.low_freq_signal_radius),
            "class templates live strictly inside this frequency radius"),
        key("data.template_amp", LFFS_FIELD(data.generator.template_amp), "peak amplitude of the class template"),
        key("data.jitter_amp", LFFS_FIELD(data.generator.jitter_amp),
            "peak amplitude of a per-image smooth field in the template band"),
        key("data.noise_amp", LFFS_FIELD(data.generator.noise_amp), "uniform per-pixel noise amplitude"),
        key("data.class_hf_amp", LFFS_FIELD(data.generator.class_hf_amp),
            "peak amplitude of a per-class pattern above hf_radius"),
        key("data.hf_radius", LFFS_FIELD(data.generator.hf_radius), "lower radius of the high-frequency band"),
        key("data.base_path", LFFS_FIELD(data.base_path), "FSDS base set; with novel_path, replaces gen-data output"),
        key("data.novel_path", LFFS_FIELD(data.novel_path), "FSDS novel set"),
        key("model.width", LFFS_FIELD(width), "channels of every conv block", "64"),
        key("pretrain.epochs", LFFS_FIELD(pretrain.epochs), "teacher and student epochs", "40"),
        key("pretrain.batch_size", LFFS_FIELD(pretrain.batch_size), "minibatch size", "128"),
        key("pretrain.learning_rate", LFFS_FIELD(pretrain.optimizer.learning_rate),
            "SGD base learning rate, cosine annealed"),
        key("pretrain.momentum", LFFS_FIELD(pretrain.optimizer.momentum), "SGD momentum", "not stated"),
        key("pretrain.weight_decay", LFFS_FIELD(pretrain.optimizer.weight_decay), "SGD weight decay", "not stated"),
        choice("pretrain.freq_loss", LFFS_FIELD(pretrain.freq_loss), loss_name, freq_loss_from_string,
               "frequency regularizer: cosine or kl"),
        choice("pretrain.freq_source", LFFS_FIELD(pretrain.freq_source), source_name, freq_source_from_string,
               "regularization target: teacher (distillation) or self"),
        choice("pretrain.student_bn", LFFS_FIELD(pretrain.student_bn), bn_name, bn_from_name,
               "student batchnorm during distillation: train, eval or frozen"),
        key("pretrain.shift_subset", LFFS_FIELD(pretrain.shift_subset),
            "base images in the per-epoch peak accuracy test", "full base set"),
        key("schedule.r_max", LFFS_FIELD(pretrain.r_max), "largest filter radius"),
        key("schedule.r_min", LFFS_FIELD(pretrain.r_min), "smallest filter radius"),
        key("schedule.lambda", LFFS_FIELD(pretrain.lambda), "long-tail decay of the radius weights"),
        key("schedule.threshold", LFFS_FIELD(pretrain.threshold), "accuracy at the peak that moves it one radius"),
        key("finetune.epochs", LFFS_FIELD(finetune.epochs), "full-episode steps"),
        key("finetune.learning_rate", LFFS_FIELD(finetune.optimizer.learning_rate), "Adam learning rate, fixed"),
        key("finetune.use_entropy", LFFS_FIELD(finetune.use_entropy), "query entropy term"),
        key("finetune.use_freq_reg", LFFS_FIELD(finetune.use_freq_reg), "frequency consistency term"),
        choice("finetune.freq_reg_target", LFFS_FIELD(finetune.freq_reg_target), target_name,
               reg_target_from_string, "consistency term on query, support or both"),
        choice("finetune.freq_loss", LFFS_FIELD(finetune.freq_loss), loss_name, freq_loss_from_string,
               "consistency loss: cosine or kl"),
        choice("finetune.bn_mode", LFFS_FIELD(finetune.bn_mode), bn_name, bn_from_name,
               "batchnorm while finetuning: frozen or eval"),
        key("finetune.head_scale", LFFS_FIELD(finetune.head_scale), "cosine head temperature", "not stated"),
        key("finetune.episode", LFFS_FIELD(finetune_episode), "episode index the finetune subcommand adapts to"),
        key("attack.epsilon", LFFS_FIELD(attack.epsilon), "l-infinity budget in [0,1] pixel units"),
        key("attack.step_size", LFFS_FIELD(attack.step_size), "PGD step"),
        key("attack.iters", LFFS_FIELD(attack.iters), "PGD iterations"),
        key("attack.random_start", LFFS_FIELD(attack.random_start), "uniform start inside the ball"),
        choice("attack.target_forward", LFFS_FIELD(attack.target_forward), surface_name,
               attack_surface_from_string, "attacked function: plain network or the ensemble inference path"),
        key("attack.both_surfaces", LFFS_FIELD(eval.both_surfaces), "also report the other attack surface"),
        key("attack.dump_adversarial", LFFS_FIELD(dump_adversarial),
            "write adversarial query batches to <output>/adversarial"),
        key("eval.episodes", LFFS_FIELD(eval.episodes), "evaluation episodes", "1000"),
        key("eval.ways", LFFS_FIELD(eval.episode.ways), "classes per episode"),
        key("eval.shots", LFFS_FIELD(eval.episode.shots), "support images per class"),
        key("eval.per_class_shots", LFFS_FIELD(eval.episode.per_class_shots),
            "explicit support counts, one per way; overrides shots when non-empty"),
        key("eval.queries", LFFS_FIELD(eval.episode.queries), "query images per class"),
        choice("eval.inference", LFFS_FIELD(eval.inference.kind), kind_name, inference_kind_from_string,
               "prediction path: plain, fixed_radius or ensemble"),
        key("eval.radius", LFFS_FIELD(eval.inference.radius), "filter radius for fixed_radius inference"),
        key("eval.export_features", LFFS_FIELD(export_features),
            "eval also writes student features of the novel set to <output>/features.fsds"),
        key("seeds.data", LFFS_FIELD(seeds.data), "synthetic data generator seed"),
        key("seeds.pretrain", LFFS_FIELD(seeds.pretrain), "teacher and student training seed"),
        key("seeds.eval", LFFS_FIELD(seeds.eval), "episode sampling, finetuning and attack seed"),
        key("precision", LFFS_FIELD(precision), "floating point bits: 32 or 64"),
        key("output", LFFS_FIELD(output), "directory for artifacts and reports"),
        key("claim.collapse_episodes", LFFS_FIELD(claim.collapse_episodes),
            "vanilla episodes in the attack collapse check"),
        key("claim.collapse_ratio", LFFS_FIELD(claim.collapse_ratio),
            "vanilla robust accuracy must stay below this fraction of clean"),
        key("claim.robust_gap", LFFS_FIELD(claim.robust_gap), "required robust accuracy gain over vanilla"),
        key("claim.clean_tolerance", LFFS_FIELD(claim.clean_tolerance), "allowed clean accuracy difference"),
        key("claim.ladder_radius", LFFS_FIELD(claim.ladder_radius), "radius of the fixed-radius ablation rows"),
        key("claim.adaptive_episodes", LFFS_FIELD(claim.adaptive_episodes),
            "full-pipeline episodes also attacked through the ensemble"),
        key("claim.collapse_seconds", LFFS_FIELD(claim.collapse_seconds), "time budget of the collapse check"),
        key("claim.claim_seconds", LFFS_FIELD(claim.claim_seconds), "time budget of vanilla vs full pipeline"),
        key("claim.ladder_seconds", LFFS_FIELD(claim.ladder_seconds), "time budget of the ablation ladder"),
        key("claim.check_determinism", LFFS_FIELD(claim.check_determinism),
            "rerun the experiment and compare artifacts byte for byte"),
    };
  }();
  return table;
}

#undef LFFS_FIELD

const KeyDef* find_key(const std::string& path) {
  for (const auto& k : key_table())
    if (k.path == path) return &k;
  return nullptr;
}

bool is_section(const std::string& prefix) {
  for (const auto& k : key_table())
    if (k.path.rfind(prefix + ".", 0) == 0) return true;
  return false;
}

void overlay(ExperimentConfig& config, const json& node, const std::string& prefix) {
  for (const auto& [name, value] : node.items()) {
    const std::string path = prefix.empty() ? name : prefix + "." + name;
    if (const auto* k = find_key(path)) {
      k->set(config, value);
    } else if (is_section(path)) {
      if (!value.is_object()) bad_type(path, "an object", value);
      overlay(config, value, path);
    } else {
      throw ConfigError("unknown config key '" + path + "'");
    }
  }
}

template <typename F>
void check(const std::string& section, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    throw ConfigError("config section '" + section + "': " + e.what());
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

ConvNetConfig ExperimentConfig::arch(const Dataset& base) const {
  ConvNetConfig out;
  out.in_channels = base.images.channels;
  out.side = base.images.height;
  out.width = width;
  out.num_classes = base.class_count;
  return out;
}

PretrainConfig ExperimentConfig::pretrain_config() const {
  PretrainConfig out = pretrain;
  out.seed = seeds.pretrain;
  return out;
}

EvalSettings ExperimentConfig::eval_settings(std::size_t workers) const {
  EvalSettings out = eval;
  out.finetune = finetune;
  out.attack = attack;
  out.seed = seeds.eval;
  out.workers = std::max<std::size_t>(workers, 1);
  return out;
}

void ExperimentConfig::validate() const {
  check("data", [&] { data.generator.validate(); });
  require(data.base_path.empty() == data.novel_path.empty(),
          "config keys 'data.base_path' and 'data.novel_path' must be set together");
  require(!data.base_path.empty() || data.generator.side % 16 == 0,
          "config key 'data.side' must be a multiple of 16 (four 2x2 poolings)");
  require(width >= 1, "config key 'model.width' must be at least 1");
  require(pretrain.epochs >= 1, "config key 'pretrain.epochs' must be at least 1");
  check("pretrain", [&] { pretrain.validate(); });
  check("finetune", [&] { finetune.validate(); });
  check("attack", [&] { attack.validate(); });
  check("eval", [&] { eval.episode.validate(); });
  require(eval.episodes >= 1, "config key 'eval.episodes' must be at least 1");
  require(eval.episode.queries >= 1, "config key 'eval.queries' must be at least 1");
  require(eval.inference.kind != InferenceKind::fixed_radius || eval.inference.radius >= 1,
          "config key 'eval.radius' must be at least 1 for fixed_radius inference");
  require(precision == 32 || precision == 64, "config key 'precision' must be 32 or 64");
  require(!output.empty(), "config key 'output' must not be empty");
  require(claim.collapse_episodes >= 1, "config key 'claim.collapse_episodes' must be at least 1");
  require(claim.collapse_ratio >= 0 && claim.collapse_ratio <= 1, "config key 'claim.collapse_ratio' must lie in [0, 1]");
  require(claim.ladder_radius >= 1, "config key 'claim.ladder_radius' must be at least 1");
}

ExperimentConfig default_experiment_config() { return ExperimentConfig{}; }

ExperimentConfig parse_experiment_config(const nlohmann::json& doc, const ExperimentConfig& base) {
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  ExperimentConfig out = base;
  overlay(out, doc, "");
  out.validate();
  return out;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc);
}

nlohmann::ordered_json to_json(const ExperimentConfig& config) {
  ojson out = ojson::object();
  for (const auto& k : key_table()) {
    ojson* node = &out;
    std::size_t start = 0;
    for (std::size_t dot = k.path.find('.'); dot != std::string::npos; dot = k.path.find('.', start)) {
      node = &(*node)[k.path.substr(start, dot - start)];
      start = dot + 1;
    }
    (*node)[k.path.substr(start)] = k.get(config);
  }
  return out;
}

void reseed(ExperimentConfig& config, std::uint64_t master) {
  config.seeds.data = derive_seed(master, 0);
  config.seeds.pretrain = derive_seed(master, 1);
  config.seeds.eval = derive_seed(master, 2);
}

std::vector<ConfigKey> config_keys() {
  const ExperimentConfig defaults = default_experiment_config();
  std::vector<ConfigKey> out;
  for (const auto& k : key_table()) out.push_back({k.path, k.get(defaults).dump(), k.paper, k.help});
  return out;
}

}  // namespace lffs
