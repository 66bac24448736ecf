#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lffs/ops.hpp"
#include "lffs/random.hpp"
#include "lffs/tensor.hpp"

namespace lffs {

struct ConvNetConfig {
  std::size_t in_channels = 3;
  std::size_t side = 32;
  std::size_t width = 64;
  std::size_t num_classes = 8;

  static constexpr std::size_t kBlocks = 4;
  std::size_t feature_dim() const;
  bool operator==(const ConvNetConfig&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Four {conv3×3, batchnorm, relu, maxpool2×2} blocks, flatten, linear to
/// base-class logits. Convolutions carry no bias; batchnorm absorbs it.
template <typename T>
class ConvNet {
 public:
  explicit ConvNet(ConvNetConfig config);

  /// Kaiming-normal convolutions, unit/zero batchnorm, uniform fan-in linear.
  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& x);
  /// Flattened output of the last block.
  Tensor<T> forward_features(const Tensor<T>& x);
  Tensor<T> classify_features(const Tensor<T>& features);

  void set_bn_mode(BatchNormMode mode) { bn_mode_ = mode; }
  BatchNormMode bn_mode() const { return bn_mode_; }

  /// Trainable tensors in a fixed order.
  std::vector<Tensor<T>> parameters() const;
  /// Every persisted value, running statistics included, as named tensors.
  std::vector<NamedTensor<T>> state() const;
  /// Overwrites values in place; throws ShapeError naming the parameter on
  /// a missing entry or shape mismatch.
  void load_state(const std::vector<NamedTensor<T>>& values);

  /// Deep copy with fresh graph leaves.
  ConvNet clone() const;

  const ConvNetConfig& config() const { return config_; }

 private:
  struct Block {
    Tensor<T> conv_weight;
    Tensor<T> bn_weight;
    Tensor<T> bn_bias;
    BatchNormStats<T> stats;
  };

  void check_input(const Tensor<T>& x) const;

  ConvNetConfig config_;
  std::vector<Block> blocks_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;
  BatchNormMode bn_mode_ = BatchNormMode::train;
};

/// Scaled cosine classifier: logit_j = s · (ŵ_j · f̂), no bias.
template <typename T>
struct CosineHead {
  Tensor<T> weight;  // [k × F]
  T scale = T(10);
  T eps = T(1e-8);

  Tensor<T> forward(const Tensor<T>& features) const;
  std::size_t ways() const { return weight.dim(0); }
};

/// Row j is the mean of the support features labelled j. Throws
/// std::invalid_argument when some class in [0, ways) has no sample.
template <typename T>
CosineHead<T> init_head_from_support(const Tensor<T>& features, std::span<const int> labels, std::size_t ways,
                                     T scale = T(10));

/// Backbone with a few-shot head on top of its logits.
template <typename T>
struct FewShotModel {
  ConvNet<T> backbone;
  CosineHead<T> head;

  Tensor<T> forward(const Tensor<T>& x) { return head.forward(backbone.forward(x)); }
  std::vector<Tensor<T>> parameters() const;
};

}  // namespace lffs
