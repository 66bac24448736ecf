#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lffs/random.hpp"
#include "lffs/tensor.hpp"

namespace lffs {

/// Dense [N×C×H×W] float images.
struct ImageBatch {
  std::size_t count = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }
  void append(std::span<const float> image);
  ImageBatch subset(std::span<const std::size_t> indices) const;
  bool operator==(const ImageBatch&) const = default;
};

template <typename T>
Tensor<T> to_tensor(const ImageBatch& batch);
template <typename T>
ImageBatch from_tensor(const Tensor<T>& x);

/// `features` marks exported activations: same layout, no pixel-range check.
enum class Split : std::uint8_t { base = 0, novel = 1, features = 2 };
std::string to_string(Split split);

struct Dataset {
  ImageBatch images;
  std::vector<int> labels;
  std::size_t class_count = 0;
  Split split = Split::base;

  std::size_t size() const { return labels.size(); }
  /// Throws DatasetError on a broken invariant.
  void validate() const;
  bool operator==(const Dataset&) const = default;
};

class DatasetError : public std::runtime_error {
 public:
  enum class Kind { io, format, invariant, insufficient };
  DatasetError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// FSDS layout, little-endian: "FSDS" | u32 version | u32 N | u32 C | u32 H |
// u32 W | u32 class_count | u8 split | N × u16 label | N·C·H·W × f32.
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Base and novel sets must carry their split tags and share no image.
void require_disjoint(const Dataset& base, const Dataset& novel);

struct SyntheticConfig {
  std::size_t classes = 13;
  std::size_t novel_classes = 5;
  std::size_t per_class = 200;
  std::size_t side = 32;
  std::size_t channels = 3;
  /// Class templates live strictly inside this radius, zero frequency excluded.
  std::size_t low_freq_signal_radius = 4;
  /// Uniform per-pixel noise amplitude.
  double noise_amp = 0.05;
  /// Peak amplitude of each class template around mid-grey.
  double template_amp = 0.3;
  /// Peak amplitude of a per-sample smooth field from the same band.
  double jitter_amp = 0.15;
  /// Peak amplitude of a fixed per-class pattern above hf_radius.
  double class_hf_amp = 0.0;
  std::size_t hf_radius = 8;

  void validate() const;
};

struct SyntheticData {
  Dataset base;
  Dataset novel;
};

SyntheticData generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

class LabelAccess;
struct SampledEpisode;
struct LabelAudit;

/// Query labels of a sampled episode. Only the evaluator (and the test audit
/// hook) can read them; finetuning never sees this type.
class SealedLabels {
 public:
  std::size_t size() const { return labels_.size(); }

 private:
  explicit SealedLabels(std::vector<int> labels) : labels_(std::move(labels)) {}
  std::vector<int> labels_;

  friend class LabelAccess;
  friend struct LabelAudit;
  friend struct SampledEpisode;
  friend SampledEpisode sample_episode(const Dataset&, std::size_t, std::span<const std::size_t>, std::size_t, Rng&);
};

/// One k-way task as handed to finetuning: labelled support, unlabelled query.
struct Episode {
  std::size_t ways = 0;
  ImageBatch support;
  std::vector<int> support_labels;
  ImageBatch query;
};

struct SampledEpisode {
  Episode episode;
  SealedLabels query_labels{{}};
  /// Dataset class id behind each episode label.
  std::vector<int> classes;
};

/// Draws `shots.size()` classes without replacement, then shots[j] support
/// and `queries` query samples for class j. Labels are remapped to [0, k).
SampledEpisode sample_episode(const Dataset& novel, std::size_t ways, std::span<const std::size_t> shots,
                              std::size_t queries, Rng& rng);
/// Balanced variant: `shots` support samples for each of `ways` classes.
SampledEpisode sample_episode(const Dataset& novel, std::size_t ways, std::size_t shots, std::size_t queries,
                              Rng& rng);

}  // namespace lffs
