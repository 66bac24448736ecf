#include "lffs/finetune.hpp"

#include <cmath>

#include "lffs/losses.hpp"
#include "lffs/spectral.hpp"

namespace lffs {

namespace {

constexpr std::uint64_t kRadiusStream = 7;

}  // namespace

std::string to_string(RegTarget target) {
  switch (target) {
    case RegTarget::query: return "query";
    case RegTarget::support: return "support";
    case RegTarget::both: return "both";
  }
  return "unknown";
}

RegTarget reg_target_from_string(const std::string& name) {
  if (name == "query") return RegTarget::query;
  if (name == "support") return RegTarget::support;
  if (name == "both") return RegTarget::both;
  throw std::invalid_argument("unknown regularization target '" + name + "' (expected query, support or both)");
}

void FinetuneConfig::validate() const {
  if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("finetune: learning rate must be positive");
  if (!(head_scale > 0.0)) throw std::invalid_argument("finetune: head_scale must be positive");
  if (bn_mode == BatchNormMode::train) {
    throw std::invalid_argument("finetune: batchnorm must be frozen or eval during finetuning");
  }
}

template <typename T>
FinetuneResult<T> finetune_episode(const ConvNet<T>& student, const Episode& episode,
                                   const RadiusDistribution& weights, const FinetuneConfig& config) {
  config.validate();
  if (config.use_freq_reg) weights.validate();
  if (episode.support.count != episode.support_labels.size()) {
    throw std::invalid_argument("finetune_episode: support images and labels differ in count");
  }
  ConvNet<T> backbone = student.clone();
  backbone.set_bn_mode(config.bn_mode);

  const auto support = to_tensor<T>(episode.support);
  const auto query = to_tensor<T>(episode.query);
  CosineHead<T> head;
  {
    NoGradGuard no_grad;
    head = init_head_from_support(backbone.forward(support), episode.support_labels, episode.ways,
                                  static_cast<T>(config.head_scale));
  }
  FinetuneResult<T> out{FewShotModel<T>{std::move(backbone), std::move(head)}, {}};
  FewShotModel<T>& model = out.model;

  OptimizerConfig opt_config = config.optimizer;
  opt_config.total_epochs = std::max<std::size_t>(config.epochs, 1);
  Optimizer<T> opt(model.parameters(), opt_config);
  Rng radius_rng(derive_seed(config.seed, kRadiusStream));
  const bool need_query = config.use_entropy ||
                          (config.use_freq_reg && config.freq_reg_target != RegTarget::support);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_epoch(epoch);
    opt.zero_grad();
    FinetuneStep step;
    step.epoch = epoch;

    const auto support_logits = model.forward(support);
    auto loss = cross_entropy(support_logits, episode.support_labels);
    step.ce = static_cast<double>(loss.item());

    Tensor<T> query_logits;
    if (need_query && episode.query.count > 0) query_logits = model.forward(query);
    if (config.use_entropy && query_logits.defined()) {
      auto ent = entropy_loss(query_logits);
      step.entropy = static_cast<double>(ent.item());
      loss = add(loss, ent);
    }
    if (config.use_freq_reg) {
      step.radius = weights.sample(radius_rng);
      // Gradients flow through both the filtered and the unfiltered branch.
      auto branch = [&](const Tensor<T>& x, const Tensor<T>& logits) {
        return frequency_penalty(model.forward(low_pass(x, step.radius)), logits, config.freq_loss);
      };
      Tensor<T> penalty;
      const auto ns = static_cast<T>(episode.support.count), nq = static_cast<T>(episode.query.count);
      if (config.freq_reg_target == RegTarget::support || episode.query.count == 0) {
        penalty = branch(support, support_logits);
      } else if (config.freq_reg_target == RegTarget::query) {
        penalty = branch(query, query_logits);
      } else {
        penalty = add(scale(branch(support, support_logits), ns / (ns + nq)),
                      scale(branch(query, query_logits), nq / (ns + nq)));
      }
      const double value = static_cast<double>(penalty.item());
      step.freq = config.freq_loss == FreqLoss::cosine ? -value : value;
      loss = add(loss, penalty);
    }
    if (!std::isfinite(static_cast<double>(loss.item()))) throw TrainingDiverged("finetune_episode", epoch, 0);
    loss.backward();
    opt.step();
    out.trace.push_back(step);
  }
  return out;
}

template FinetuneResult<float> finetune_episode(const ConvNet<float>&, const Episode&, const RadiusDistribution&,
                                                const FinetuneConfig&);
template FinetuneResult<double> finetune_episode(const ConvNet<double>&, const Episode&, const RadiusDistribution&,
                                                 const FinetuneConfig&);

}  // namespace lffs
