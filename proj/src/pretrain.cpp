#include "lffs/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lffs/losses.hpp"
#include "lffs/spectral.hpp"

namespace lffs {

namespace {

// Stream ids for derive_seed; fixed so runs are reproducible.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kRadiusStream = 2;
constexpr std::uint64_t kSubsetStream = 3;
constexpr std::uint64_t kOrderStream = 1000;

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                    std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, kOrderStream + epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(std::min(n, i + batch)));
  }
  return out;
}

template <typename T>
Tensor<T> gather(const Dataset& data, std::span<const std::size_t> idx, std::vector<int>& labels) {
  labels.clear();
  for (std::size_t i : idx) labels.push_back(data.labels[i]);
  return to_tensor<T>(data.images.subset(idx));
}

std::size_t count_correct(const std::vector<int>& pred, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return hits;
}

void check_dataset(const Dataset& base, const ConvNetConfig& arch, const char* stage) {
  if (base.size() == 0) throw std::invalid_argument(std::string(stage) + ": base dataset is empty");
  if (base.class_count != arch.num_classes) {
    throw std::invalid_argument(std::string(stage) + ": dataset has " + std::to_string(base.class_count) +
                                " classes but the network outputs " + std::to_string(arch.num_classes));
  }
  if (base.images.channels != arch.in_channels || base.images.height != arch.side || base.images.width != arch.side) {
    throw ShapeError(stage, Shape{base.images.channels, base.images.height, base.images.width},
                     Shape{arch.in_channels, arch.side, arch.side});
  }
}

OptimizerConfig annealed(OptimizerConfig opt, std::size_t epochs) {
  opt.total_epochs = std::max<std::size_t>(epochs, 1);
  return opt;
}

}  // namespace

std::string to_string(FreqLoss loss) { return loss == FreqLoss::cosine ? "cosine" : "kl"; }

FreqLoss freq_loss_from_string(const std::string& name) {
  if (name == "cosine") return FreqLoss::cosine;
  if (name == "kl") return FreqLoss::kl;
  throw std::invalid_argument("unknown frequency loss '" + name + "' (expected cosine or kl)");
}

std::string to_string(FreqSource source) { return source == FreqSource::teacher ? "teacher" : "self"; }

FreqSource freq_source_from_string(const std::string& name) {
  if (name == "teacher") return FreqSource::teacher;
  if (name == "self") return FreqSource::self;
  throw std::invalid_argument("unknown frequency source '" + name + "' (expected teacher or self)");
}

template <typename T>
Tensor<T> frequency_penalty(const Tensor<T>& low_logits, const Tensor<T>& target_logits, FreqLoss loss) {
  if (loss == FreqLoss::cosine) return scale(cosine_similarity(low_logits, target_logits), T(-1));
  return kl_div_loss(low_logits, target_logits);
}

void PretrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be at least 1");
  if (shift_subset == 0) throw std::invalid_argument("pretrain: shift_subset must be at least 1");
  if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("pretrain: learning rate must be positive");
  init_schedule(r_max, r_min, lambda, threshold);  // throws on a bad range
}

template <typename T>
double filtered_accuracy(ConvNet<T>& net, const ImageBatch& images, std::span<const int> labels, std::size_t radius) {
  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 256;
  std::size_t hits = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.count; start += kChunk) {
    idx.resize(std::min(kChunk, images.count - start));
    std::iota(idx.begin(), idx.end(), start);
    auto x = to_tensor<T>(images.subset(idx));
    if (radius > 0) x = low_pass(x, radius);
    hits += count_correct(argmax_rows(net.forward(x)), labels.subspan(start, idx.size()));
  }
  return images.count ? static_cast<double>(hits) / static_cast<double>(images.count) : 0.0;
}

template <typename T>
TeacherResult<T> train_teacher(const Dataset& base, const ConvNetConfig& arch, const PretrainConfig& config,
                               const EpochCallback& on_epoch) {
  config.validate();
  check_dataset(base, arch, "train_teacher");
  TeacherResult<T> out{ConvNet<T>(arch), {}};
  Rng init_rng(derive_seed(config.seed, kInitStream));
  out.net.init(init_rng);
  out.net.set_bn_mode(BatchNormMode::train);

  Optimizer<T> opt(out.net.parameters(), annealed(config.optimizer, config.epochs));
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_epoch(epoch);
    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = opt.learning_rate();
    std::size_t hits = 0, step = 0;
    for (const auto& idx : epoch_batches(base.size(), config.batch_size, config.seed, epoch)) {
      const auto x = gather<T>(base, idx, labels);
      opt.zero_grad();
      const auto logits = out.net.forward(x);
      auto loss = cross_entropy(logits, labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw TrainingDiverged("train_teacher", epoch, step);
      loss.backward();
      opt.step();
      log.loss += value * static_cast<double>(idx.size());
      hits += count_correct(argmax_rows(logits), labels);
      ++step;
    }
    log.loss /= static_cast<double>(base.size());
    log.ce = log.loss;
    log.train_accuracy = static_cast<double>(hits) / static_cast<double>(base.size());
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  opt.zero_grad();  // hand back a network without stale gradients
  out.net.set_bn_mode(BatchNormMode::eval);
  return out;
}

template <typename T>
StudentResult<T> distill_student(const ConvNet<T>& teacher_in, const Dataset& base, const PretrainConfig& config,
                                 const EpochCallback& on_epoch) {
  config.validate();
  check_dataset(base, teacher_in.config(), "distill_student");
  const bool use_teacher = config.freq_source == FreqSource::teacher;

  // Private copy so the caller's teacher stays bit-identical.
  ConvNet<T> teacher = teacher_in.clone();
  teacher.set_bn_mode(BatchNormMode::eval);

  StudentResult<T> out{ConvNet<T>(teacher.config()), init_schedule(config.r_max, config.r_min, config.lambda,
                                                                     config.threshold),
                       {}, {}};
  if (use_teacher) {
    out.net = teacher.clone();
  } else {
    Rng init_rng(derive_seed(config.seed, kInitStream));
    out.net.init(init_rng);
  }
  ConvNet<T>& student = out.net;
  const BatchNormMode train_bn = use_teacher ? config.student_bn : BatchNormMode::train;

  // Fixed subset for the shift test.
  std::vector<std::size_t> subset(base.size());
  std::iota(subset.begin(), subset.end(), 0);
  {
    Rng rng(derive_seed(config.seed, kSubsetStream));
    std::shuffle(subset.begin(), subset.end(), rng);
  }
  subset.resize(std::min(config.shift_subset, base.size()));
  std::sort(subset.begin(), subset.end());
  const ImageBatch subset_images = base.images.subset(subset);
  std::vector<int> subset_labels;
  for (std::size_t i : subset) subset_labels.push_back(base.labels[i]);

  Optimizer<T> opt(student.parameters(), annealed(config.optimizer, config.epochs));
  Rng radius_rng(derive_seed(config.seed, kRadiusStream));
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_epoch(epoch);
    student.set_bn_mode(train_bn);
    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = opt.learning_rate();
    std::size_t hits = 0, step = 0;
    const auto weights = final_distribution(out.schedule);
    for (const auto& idx : epoch_batches(base.size(), config.batch_size, config.seed, epoch)) {
      const auto x = gather<T>(base, idx, labels);
      const std::size_t radius = weights.sample(radius_rng);
      const auto xl = low_pass(x, radius);
      opt.zero_grad();
      const auto logits = student.forward(x);
      auto ce = cross_entropy(logits, labels);
      Tensor<T> target;
      if (use_teacher) {
        NoGradGuard no_grad;
        target = teacher.forward(x);
      } else {
        target = logits;
      }
      auto freq = frequency_penalty(student.forward(xl), target, config.freq_loss);
      auto loss = add(ce, freq);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw TrainingDiverged("distill_student", epoch, step);
      loss.backward();
      opt.step();
      const double n = static_cast<double>(idx.size());
      log.loss += value * n;
      log.ce += static_cast<double>(ce.item()) * n;
      log.freq += static_cast<double>(freq.item()) * n;
      hits += count_correct(argmax_rows(logits), labels);
      ++step;
    }
    const double total = static_cast<double>(base.size());
    log.loss /= total;
    log.ce /= total;
    log.freq /= total;
    log.train_accuracy = static_cast<double>(hits) / total;

    // Shift test at the current peak radius, without touching running statistics.
    student.set_bn_mode(use_teacher ? BatchNormMode::frozen : BatchNormMode::eval);
    log.acc_at_peak = filtered_accuracy(student, subset_images, subset_labels, out.schedule.peak_radius());
    const std::size_t before = out.schedule.peak_index;
    out.schedule = maybe_shift(out.schedule, log.acc_at_peak);
    log.shifted = out.schedule.peak_index != before;
    log.peak_radius = out.schedule.peak_radius();
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  opt.zero_grad();
  student.set_bn_mode(use_teacher ? BatchNormMode::frozen : BatchNormMode::eval);
  out.weights = final_distribution(out.schedule);
  return out;
}

#define LFFS_INSTANTIATE_PRETRAIN(T)                                                                           \
  template Tensor<T> frequency_penalty(const Tensor<T>&, const Tensor<T>&, FreqLoss);                         \
  template double filtered_accuracy(ConvNet<T>&, const ImageBatch&, std::span<const int>, std::size_t);       \
  template TeacherResult<T> train_teacher(const Dataset&, const ConvNetConfig&, const PretrainConfig&,        \
                                          const EpochCallback&);                                               \
  template StudentResult<T> distill_student(const ConvNet<T>&, const Dataset&, const PretrainConfig&,         \
                                            const EpochCallback&);

LFFS_INSTANTIATE_PRETRAIN(float)
LFFS_INSTANTIATE_PRETRAIN(double)

}  // namespace lffs
