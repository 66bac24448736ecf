#include "lffs/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "lffs/losses.hpp"
#include "lffs/spectral.hpp"

namespace lffs {

/// The evaluator's key to sealed query labels. Defined only in this file.
class LabelAccess {
 public:
  static const std::vector<int>& reveal(const SealedLabels& sealed) { return sealed.labels_; }
};

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Turns off requires_grad on a parameter list for the guard's lifetime, so
/// attack backward passes only compute input gradients.
template <typename T>
class FreezeParams {
 public:
  explicit FreezeParams(std::vector<Tensor<T>> params) : params_(std::move(params)) {
    for (auto& p : params_) {
      states_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeParams() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(states_[i]);
  }
  FreezeParams(const FreezeParams&) = delete;
  FreezeParams& operator=(const FreezeParams&) = delete;

 private:
  std::vector<Tensor<T>> params_;
  std::vector<bool> states_;
};

template <typename T>
std::vector<int> predict(const ForwardFn<T>& forward, const Tensor<T>& x) {
  NoGradGuard no_grad;
  return argmax_rows(forward(x));
}

std::vector<AttackSurface> surfaces_for(const EvalSettings& settings) {
  if (!settings.attack_enabled) return {};
  std::vector<AttackSurface> out{settings.attack.target_forward};
  // With plain inference both surfaces are the same function.
  if (settings.both_surfaces && settings.inference.kind != InferenceKind::plain) {
    out.push_back(settings.attack.target_forward == AttackSurface::plain ? AttackSurface::ensemble
                                                                        : AttackSurface::plain);
  }
  return out;
}

template <typename T>
EpisodeResult run_episode(const ConvNet<T>& student, const RadiusDistribution& weights, const Dataset& novel,
                          const EvalSettings& settings, const std::vector<AttackSurface>& surfaces, std::size_t index) {
  EpisodeResult result;
  result.index = index;
  result.seed = derive_seed(settings.seed, index);
  Rng sample_rng(result.seed);
  const auto shots = settings.episode.shot_counts();
  const auto sampled = sample_episode(novel, settings.episode.ways, shots, settings.episode.queries, sample_rng);

  auto start = Clock::now();
  FinetuneConfig ft = settings.finetune;
  ft.seed = derive_seed(result.seed, 1);
  auto tuned = finetune_episode(student, sampled.episode, weights, ft);
  result.finetune_seconds = seconds_since(start);

  FewShotModel<T>& model = tuned.model;
  FreezeParams<T> frozen(model.parameters());
  const auto forward = inference_forward(model, settings.inference, weights);
  const auto x = to_tensor<T>(sampled.episode.query);
  const auto& labels = LabelAccess::reveal(sampled.query_labels);

  start = Clock::now();
  const auto clean_pred = predict(forward, x);
  result.clean = accuracy(clean_pred, labels);
  result.inference_seconds = seconds_since(start);

  for (std::size_t s = 0; s < surfaces.size(); ++s) {
    start = Clock::now();
    Rng attack_rng(derive_seed(result.seed, 2 + s));
    const auto x_adv = pgd(attack_forward(model, surfaces[s], settings.inference, weights), x, labels,
                           settings.attack, &attack_rng);
    result.attack_seconds += seconds_since(start);
    require_in_ball(x, x_adv, settings.attack.epsilon);
    result.max_deviation = std::max(result.max_deviation, inspect_ball(x, x_adv).max_deviation);
    if (!settings.adversarial_dir.empty()) {
      Dataset dump;
      dump.images = from_tensor(x_adv);
      dump.labels = labels;
      dump.class_count = settings.episode.ways;
      dump.split = Split::novel;
      save_dataset(dump, settings.adversarial_dir /
                             ("adv_" + std::to_string(index) + "_" + to_string(surfaces[s]) + ".fsds"));
    }

    start = Clock::now();
    const auto adv_pred = predict(forward, x_adv);
    result.robust.push_back(accuracy(adv_pred, labels));
    if (s == 0) result.fooling_rate = fooling_rate(forward, clean_pred, x_adv);
    result.inference_seconds += seconds_since(start);
  }
  return result;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

template <typename T>
Tensor<T> ensemble_logits(const ForwardFn<T>& forward, const Tensor<T>& x, const RadiusDistribution& weights) {
  weights.validate();
  Tensor<T> total;
  for (std::size_t i = 0; i < weights.radii.size(); ++i) {
    if (weights.weights[i] == 0.0) continue;
    auto term = scale(forward(low_pass(x, weights.radii[i])), static_cast<T>(weights.weights[i]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

std::string to_string(InferenceKind kind) {
  switch (kind) {
    case InferenceKind::plain: return "plain";
    case InferenceKind::fixed_radius: return "fixed_radius";
    case InferenceKind::ensemble: return "ensemble";
  }
  return "unknown";
}

InferenceKind inference_kind_from_string(const std::string& name) {
  if (name == "plain") return InferenceKind::plain;
  if (name == "fixed_radius") return InferenceKind::fixed_radius;
  if (name == "ensemble") return InferenceKind::ensemble;
  throw std::invalid_argument("unknown inference mode '" + name + "' (expected plain, fixed_radius or ensemble)");
}

template <typename T>
ForwardFn<T> inference_forward(FewShotModel<T>& model, const InferenceMode& mode, const RadiusDistribution& weights) {
  FewShotModel<T>* m = &model;
  switch (mode.kind) {
    case InferenceKind::plain:
      return [m](const Tensor<T>& x) { return m->forward(x); };
    case InferenceKind::fixed_radius: {
      const std::size_t r = mode.radius;
      if (r == 0) throw std::invalid_argument("fixed-radius inference needs a positive radius");
      return [m, r](const Tensor<T>& x) { return m->forward(low_pass(x, r)); };
    }
    case InferenceKind::ensemble: {
      weights.validate();
      return [m, weights](const Tensor<T>& x) {
        return ensemble_logits<T>([m](const Tensor<T>& v) { return m->forward(v); }, x, weights);
      };
    }
  }
  throw std::invalid_argument("unknown inference mode");
}

template <typename T>
ForwardFn<T> attack_forward(FewShotModel<T>& model, AttackSurface surface, const InferenceMode& mode,
                            const RadiusDistribution& weights) {
  if (surface == AttackSurface::plain) return inference_forward(model, InferenceMode{InferenceKind::plain, 0}, weights);
  return inference_forward(model, mode, weights);
}

std::vector<std::size_t> EpisodeSpec::shot_counts() const {
  if (!per_class_shots.empty()) return per_class_shots;
  return std::vector<std::size_t>(ways, shots);
}

void EpisodeSpec::validate() const {
  if (ways < 2) throw std::invalid_argument("episode: ways must be at least 2");
  if (!per_class_shots.empty() && per_class_shots.size() != ways) {
    throw std::invalid_argument("episode: per_class_shots needs one count per way");
  }
  for (std::size_t s : shot_counts())
    if (s == 0) throw std::invalid_argument("episode: every class needs at least one support sample");
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  double sum = 0;
  for (double v : values) sum += v;
  out.mean = sum / n;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return out;
}

double EvalReport::total_seconds() const {
  double total = 0;
  for (const auto& e : episodes) total += e.finetune_seconds + e.attack_seconds + e.inference_seconds;
  return total;
}

template <typename T>
EvalReport evaluate(const ConvNet<T>& student, const RadiusDistribution& weights, const Dataset& novel,
                    const EvalSettings& settings, const std::string& label) {
  settings.episode.validate();
  settings.attack.validate();
  settings.finetune.validate();
  if (settings.inference.kind == InferenceKind::ensemble) weights.validate();
  if (novel.class_count < settings.episode.ways) {
    throw DatasetError(DatasetError::Kind::insufficient,
                       "evaluate: " + std::to_string(settings.episode.ways) + "-way episodes need that many novel classes, have " +
                           std::to_string(novel.class_count));
  }

  EvalReport report;
  report.label = label;
  report.settings = settings;
  report.surfaces = surfaces_for(settings);
  report.weights_size = weights.radii.size();
  report.episodes.resize(settings.episodes);

  std::vector<std::exception_ptr> errors(settings.episodes);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < settings.episodes; i = next++) {
      try {
        report.episodes[i] = run_episode(student, weights, novel, settings, report.surfaces, i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(settings.workers, 1, std::max<std::size_t>(settings.episodes, 1));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& err) {
      throw EpisodeFailed(i, derive_seed(settings.seed, i), err.what());
    }
  }

  std::vector<double> clean;
  for (const auto& e : report.episodes) clean.push_back(e.clean);
  report.clean = aggregate(clean);
  for (std::size_t s = 0; s < report.surfaces.size(); ++s) {
    std::vector<double> robust;
    for (const auto& e : report.episodes) robust.push_back(e.robust[s]);
    report.robust.push_back(aggregate(robust));
  }
  return report;
}

nlohmann::ordered_json report_document(const EvalReport& report) {
  using nlohmann::ordered_json;
  const auto& s = report.settings;
  ordered_json j;
  j["label"] = report.label;
  j["episodes"] = report.episodes.size();
  j["clean"] = {{"mean", report.clean.mean}, {"ci95", report.clean.ci95}};
  ordered_json robust = ordered_json::object();
  for (std::size_t i = 0; i < report.surfaces.size(); ++i) {
    robust[to_string(report.surfaces[i])] = {{"mean", report.robust[i].mean}, {"ci95", report.robust[i].ci95}};
  }
  j["robust"] = robust;
  j["mode"] = {{"inference", to_string(s.inference.kind)},
               {"inference_radius", s.inference.radius},
               {"ensemble_radii", report.weights_size},
               {"finetune_entropy", s.finetune.use_entropy},
               {"finetune_freq_reg", s.finetune.use_freq_reg},
               {"finetune_freq_target", to_string(s.finetune.freq_reg_target)}};
  j["attack"] = {{"epsilon", s.attack.epsilon},
                 {"step_size", s.attack.step_size},
                 {"iters", s.attack.iters},
                 {"random_start", s.attack.random_start},
                 {"target_forward", to_string(s.attack.target_forward)}};
  j["episode"] = {{"ways", s.episode.ways}, {"shots", s.episode.shot_counts()}, {"queries", s.episode.queries}};
  j["seed"] = s.seed;
  ordered_json rows = ordered_json::array();
  for (const auto& e : report.episodes) {
    ordered_json row;
    row["index"] = e.index;
    row["seed"] = e.seed;
    row["clean"] = e.clean;
    for (std::size_t i = 0; i < report.surfaces.size(); ++i) row["robust_" + to_string(report.surfaces[i])] = e.robust[i];
    row["fooling_rate"] = e.fooling_rate;
    rows.push_back(row);
  }
  j["per_episode"] = rows;
  return j;
}

std::string report_json(const EvalReport& report, int indent) { return report_document(report).dump(indent) + "\n"; }

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "label,episode,seed,clean";
  for (auto s : report.surfaces) os << ",robust_" << to_string(s);
  os << ",fooling_rate\n";
  for (const auto& e : report.episodes) {
    os << report.label << ',' << e.index << ',' << e.seed << ',' << fixed(e.clean, 6);
    for (double r : e.robust) os << ',' << fixed(r, 6);
    os << ',' << fixed(e.fooling_rate, 6) << '\n';
  }
  return os.str();
}

std::string timing_json(const EvalReport& report, int indent) {
  nlohmann::ordered_json j;
  double finetune = 0, attack = 0, inference = 0;
  for (const auto& e : report.episodes) {
    finetune += e.finetune_seconds;
    attack += e.attack_seconds;
    inference += e.inference_seconds;
  }
  const double n = std::max<double>(1.0, static_cast<double>(report.episodes.size()));
  j["label"] = report.label;
  j["finetune_seconds_per_episode"] = finetune / n;
  j["attack_seconds_per_episode"] = attack / n;
  j["inference_seconds_per_episode"] = inference / n;
  j["total_seconds"] = finetune + attack + inference;
  return j.dump(indent) + "\n";
}

template <typename T>
void export_features(ConvNet<T>& net, const ImageBatch& images, const std::filesystem::path& path,
                     std::span<const int> labels) {
  if (!labels.empty() && labels.size() != images.count) {
    throw ShapeError("export_features", Shape{images.count}, Shape{labels.size()});
  }
  Dataset out;
  out.split = Split::features;
  const std::size_t dim = net.config().feature_dim();
  out.images = ImageBatch{0, dim, 1, 1, {}};
  int max_label = 0;
  if (images.count > 0) {
    NoGradGuard no_grad;
    const auto features = net.forward_features(to_tensor<T>(images));
    out.images.count = images.count;
    out.images.pixels.assign(features.data().begin(), features.data().end());
  }
  for (std::size_t i = 0; i < images.count; ++i) {
    out.labels.push_back(labels.empty() ? 0 : labels[i]);
    max_label = std::max(max_label, out.labels.back());
  }
  out.class_count = static_cast<std::size_t>(max_label) + 1;
  save_dataset(out, path);
}

#define LFFS_INSTANTIATE_EVAL(T)                                                                               \
  template Tensor<T> ensemble_logits(const ForwardFn<T>&, const Tensor<T>&, const RadiusDistribution&);       \
  template ForwardFn<T> inference_forward(FewShotModel<T>&, const InferenceMode&, const RadiusDistribution&);  \
  template ForwardFn<T> attack_forward(FewShotModel<T>&, AttackSurface, const InferenceMode&,                 \
                                       const RadiusDistribution&);                                             \
  template EvalReport evaluate(const ConvNet<T>&, const RadiusDistribution&, const Dataset&, const EvalSettings&, \
                               const std::string&);                                                            \
  template void export_features(ConvNet<T>&, const ImageBatch&, const std::filesystem::path&, std::span<const int>);

LFFS_INSTANTIATE_EVAL(float)
LFFS_INSTANTIATE_EVAL(double)

}  // namespace lffs
