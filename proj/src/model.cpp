#include "lffs/model.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace lffs {

namespace {

constexpr std::size_t kPoolFactor = std::size_t{1} << ConvNetConfig::kBlocks;

void require_side(std::size_t side) {
  if (side == 0 || side % kPoolFactor) {
    throw ShapeError("convnet", "input side " + std::to_string(side) + " must be a positive multiple of " +
                                    std::to_string(kPoolFactor) + " (four 2x2 poolings)");
  }
}

}  // namespace

std::size_t ConvNetConfig::feature_dim() const {
  const std::size_t s = side / kPoolFactor;
  return width * s * s;
}

template <typename T>
ConvNet<T>::ConvNet(ConvNetConfig config) : config_(config) {
  require_side(config_.side);
  if (config_.in_channels == 0 || config_.width == 0 || config_.num_classes < 2) {
    throw std::invalid_argument("convnet: channels and width must be positive and classes >= 2");
  }
  std::size_t in = config_.in_channels;
  for (std::size_t b = 0; b < ConvNetConfig::kBlocks; ++b) {
    Block block;
    block.conv_weight = Tensor<T>::zeros({config_.width, in, 3, 3}, true);
    block.bn_weight = Tensor<T>::full({config_.width}, T(1), true);
    block.bn_bias = Tensor<T>::zeros({config_.width}, true);
    block.stats.running_mean.assign(config_.width, T(0));
    block.stats.running_var.assign(config_.width, T(1));
    blocks_.push_back(std::move(block));
    in = config_.width;
  }
  fc_weight_ = Tensor<T>::zeros({config_.num_classes, config_.feature_dim()}, true);
  fc_bias_ = Tensor<T>::zeros({config_.num_classes}, true);
}

template <typename T>
void ConvNet<T>::init(Rng& rng) {
  for (auto& block : blocks_) {
    const double fan_in = static_cast<double>(block.conv_weight.dim(1) * 9);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : block.conv_weight.data()) v = static_cast<T>(normal(rng));
    for (auto& v : block.bn_weight.data()) v = T(1);
    for (auto& v : block.bn_bias.data()) v = T(0);
    std::fill(block.stats.running_mean.begin(), block.stats.running_mean.end(), T(0));
    std::fill(block.stats.running_var.begin(), block.stats.running_var.end(), T(1));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(config_.feature_dim()));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (auto& v : fc_weight_.data()) v = static_cast<T>(uniform(rng));
  for (auto& v : fc_bias_.data()) v = static_cast<T>(uniform(rng));
}

template <typename T>
void ConvNet<T>::check_input(const Tensor<T>& x) const {
  if (x.rank() != 4) throw ShapeError("convnet", "expected [B x C x d x d] input, got " + shape_str(x.shape()));
  require_side(x.dim(2));
  if (x.dim(1) != config_.in_channels || x.dim(2) != config_.side || x.dim(3) != config_.side) {
    throw ShapeError("convnet", x.shape(), Shape{x.dim(0), config_.in_channels, config_.side, config_.side});
  }
}

template <typename T>
Tensor<T> ConvNet<T>::forward_features(const Tensor<T>& x) {
  check_input(x);
  Tensor<T> h = x;
  for (auto& block : blocks_) {
    h = conv2d(h, block.conv_weight, Tensor<T>{}, Conv2dOptions{1, 1});
    h = batchnorm2d(h, block.bn_weight, block.bn_bias, block.stats, bn_mode_);
    h = relu(h);
    h = max_pool2d(h, 2);
  }
  return flatten(h);
}

template <typename T>
Tensor<T> ConvNet<T>::classify_features(const Tensor<T>& features) {
  return linear(features, fc_weight_, fc_bias_);
}

template <typename T>
Tensor<T> ConvNet<T>::forward(const Tensor<T>& x) {
  return classify_features(forward_features(x));
}

template <typename T>
std::vector<Tensor<T>> ConvNet<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& block : blocks_) {
    out.push_back(block.conv_weight);
    out.push_back(block.bn_weight);
    out.push_back(block.bn_bias);
  }
  out.push_back(fc_weight_);
  out.push_back(fc_bias_);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> ConvNet<T>::state() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& block = blocks_[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    out.push_back({prefix + "conv.weight", block.conv_weight});
    out.push_back({prefix + "bn.weight", block.bn_weight});
    out.push_back({prefix + "bn.bias", block.bn_bias});
    out.push_back({prefix + "bn.running_mean", Tensor<T>::from({config_.width}, block.stats.running_mean)});
    out.push_back({prefix + "bn.running_var", Tensor<T>::from({config_.width}, block.stats.running_var)});
  }
  out.push_back({"fc.weight", fc_weight_});
  out.push_back({"fc.bias", fc_bias_});
  return out;
}

template <typename T>
void ConvNet<T>::load_state(const std::vector<NamedTensor<T>>& values) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& v : values) by_name[v.name] = &v.tensor;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ShapeError("load_state", "missing parameter '" + name + "'");
    if (it->second->shape() != shape) {
      throw ShapeError("load_state", "parameter '" + name + "' has shape " + shape_str(it->second->shape()) +
                                         ", architecture expects " + shape_str(shape));
    }
    return *it->second;
  };
  // Validate everything before writing so a failed load leaves the net intact.
  for (const auto& item : state()) fetch(item.name, item.tensor.shape());
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto& block = blocks_[b];
    const std::string prefix = "block" + std::to_string(b) + ".";
    auto copy_into = [&](Tensor<T>& dst, const std::string& name) {
      const auto& src = fetch(name, dst.shape());
      std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    };
    copy_into(block.conv_weight, prefix + "conv.weight");
    copy_into(block.bn_weight, prefix + "bn.weight");
    copy_into(block.bn_bias, prefix + "bn.bias");
    const auto& rm = fetch(prefix + "bn.running_mean", Shape{config_.width});
    const auto& rv = fetch(prefix + "bn.running_var", Shape{config_.width});
    block.stats.running_mean.assign(rm.data().begin(), rm.data().end());
    block.stats.running_var.assign(rv.data().begin(), rv.data().end());
  }
  const auto& fw = fetch("fc.weight", fc_weight_.shape());
  std::copy(fw.data().begin(), fw.data().end(), fc_weight_.data().begin());
  const auto& fb = fetch("fc.bias", fc_bias_.shape());
  std::copy(fb.data().begin(), fb.data().end(), fc_bias_.data().begin());
}

template <typename T>
ConvNet<T> ConvNet<T>::clone() const {
  ConvNet<T> copy(config_);
  copy.load_state(state());
  copy.bn_mode_ = bn_mode_;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    copy.blocks_[b].stats.momentum = blocks_[b].stats.momentum;
    copy.blocks_[b].stats.eps = blocks_[b].stats.eps;
  }
  return copy;
}

template <typename T>
Tensor<T> CosineHead<T>::forward(const Tensor<T>& features) const {
  if (features.rank() != 2 || features.dim(1) != weight.dim(1)) {
    throw ShapeError("cosine_head", features.shape(), weight.shape());
  }
  return lffs::scale(linear(normalize_rows(features, eps), normalize_rows(weight, eps), Tensor<T>{}), scale);
}

template <typename T>
CosineHead<T> init_head_from_support(const Tensor<T>& features, std::span<const int> labels, std::size_t ways,
                                     T scale) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("init_head_from_support", features.shape(), Shape{labels.size()});
  }
  if (!(scale > T(0))) throw std::invalid_argument("init_head_from_support: scale must be positive");
  const std::size_t dim = features.dim(1);
  std::vector<double> sums(ways * dim, 0.0);
  std::vector<std::size_t> counts(ways, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= ways) {
      throw std::invalid_argument("init_head_from_support: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(ways) + ")");
    }
    ++counts[y];
    for (std::size_t f = 0; f < dim; ++f) sums[y * dim + f] += static_cast<double>(features.data()[i * dim + f]);
  }
  std::vector<T> rows(ways * dim);
  for (std::size_t c = 0; c < ways; ++c) {
    if (counts[c] == 0) {
      throw std::invalid_argument("init_head_from_support: class " + std::to_string(c) + " has no support sample");
    }
    for (std::size_t f = 0; f < dim; ++f)
      rows[c * dim + f] = static_cast<T>(sums[c * dim + f] / static_cast<double>(counts[c]));
  }
  CosineHead<T> head;
  head.weight = Tensor<T>::from({ways, dim}, std::move(rows), true);
  head.scale = scale;
  return head;
}

template <typename T>
std::vector<Tensor<T>> FewShotModel<T>::parameters() const {
  auto out = backbone.parameters();
  out.push_back(head.weight);
  return out;
}

template class ConvNet<float>;
template class ConvNet<double>;
template struct CosineHead<float>;
template struct CosineHead<double>;
template struct FewShotModel<float>;
template struct FewShotModel<double>;
template CosineHead<float> init_head_from_support(const Tensor<float>&, std::span<const int>, std::size_t, float);
template CosineHead<double> init_head_from_support(const Tensor<double>&, std::span<const int>, std::size_t, double);

}  // namespace lffs
