#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lffs/model.hpp"
#include "lffs/schedule.hpp"

namespace lffs {

// Checkpoint layout, little-endian:
//   "LFFS" | u32 version | u32 count | count × { u16 name_len | name |
//   u8 rank | rank × u32 dim | f32 payload }
// Metadata travels as reserved "meta/..." entries. Integers and doubles are
// split into 16-bit limbs so each limb is exact in f32.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Stage : std::uint8_t { teacher = 0, student = 1, finetuned = 2 };
std::string to_string(Stage stage);

struct CheckpointMeta {
  Stage stage = Stage::teacher;
  std::uint64_t seed = 0;
  ConvNetConfig arch;
  std::optional<RadiusSchedule> schedule;
  std::optional<float> head_scale;

  bool operator==(const CheckpointMeta& other) const;
};

struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const ParamEntry&) const = default;
};

struct ModelParams {
  std::vector<ParamEntry> params;
  CheckpointMeta meta;

  const ParamEntry* find(const std::string& name) const;
  bool operator==(const ModelParams&) const = default;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, format, architecture };
  CheckpointError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

template <typename T>
ModelParams export_params(const ConvNet<T>& net, const CosineHead<T>* head, CheckpointMeta meta);

/// Copies values into `net` (and `head` when given). Architecture or shape
/// disagreements raise CheckpointError::Kind::architecture naming the entry.
template <typename T>
void import_params(const ModelParams& params, ConvNet<T>& net, CosineHead<T>* head = nullptr);

/// Builds a network of the recorded architecture and loads it.
template <typename T>
ConvNet<T> network_from_params(const ModelParams& params);

}  // namespace lffs
