#include "lffs/checkpoint.hpp"

#include "binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace lffs {

namespace {

constexpr char kMagic[4] = {'L', 'F', 'F', 'S'};
const std::string kMetaPrefix = "meta/";

std::vector<float> limbs_of(std::uint64_t v) {
  return {static_cast<float>(v & 0xFFFF), static_cast<float>((v >> 16) & 0xFFFF),
          static_cast<float>((v >> 32) & 0xFFFF), static_cast<float>((v >> 48) & 0xFFFF)};
}

std::uint64_t from_limbs(std::span<const float> limbs) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const float f = limbs[i];
    if (!(f >= 0.0f && f <= 65535.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f))) {
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: corrupt metadata limb");
    }
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

std::vector<float> limbs_of(double v) { return limbs_of(std::bit_cast<std::uint64_t>(v)); }

std::vector<ParamEntry> meta_entries(const CheckpointMeta& meta) {
  std::vector<ParamEntry> out;
  out.push_back({kMetaPrefix + "stage", {1}, {static_cast<float>(meta.stage)}});
  out.push_back({kMetaPrefix + "seed", {4}, limbs_of(meta.seed)});
  out.push_back({kMetaPrefix + "arch",
                 {4},
                 {static_cast<float>(meta.arch.in_channels), static_cast<float>(meta.arch.side),
                  static_cast<float>(meta.arch.width), static_cast<float>(meta.arch.num_classes)}});
  if (meta.schedule) {
    const auto& s = *meta.schedule;
    std::vector<float> v{static_cast<float>(s.r_max), static_cast<float>(s.r_min)};
    for (float f : limbs_of(s.lambda)) v.push_back(f);
    for (float f : limbs_of(s.threshold)) v.push_back(f);
    v.push_back(static_cast<float>(s.peak_index));
    out.push_back({kMetaPrefix + "schedule", {v.size()}, v});
  }
  if (meta.head_scale) out.push_back({kMetaPrefix + "head_scale", {1}, {*meta.head_scale}});
  return out;
}

std::size_t as_count(float f) {
  if (!(f >= 0.0f && f < 16777216.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f))) {
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: corrupt integer metadata");
  }
  return static_cast<std::size_t>(f);
}

void apply_meta(CheckpointMeta& meta, const ParamEntry& e) {
  const std::string key = e.name.substr(kMetaPrefix.size());
  auto expect = [&](std::size_t n) {
    if (e.values.size() != n) {
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: metadata '" + key + "' has wrong length");
    }
  };
  if (key == "stage") {
    expect(1);
    const auto s = as_count(e.values[0]);
    if (s > 2) throw CheckpointError(CheckpointError::Kind::format, "checkpoint: unknown stage tag");
    meta.stage = static_cast<Stage>(s);
  } else if (key == "seed") {
    expect(4);
    meta.seed = from_limbs(e.values);
  } else if (key == "arch") {
    expect(4);
    meta.arch = {as_count(e.values[0]), as_count(e.values[1]), as_count(e.values[2]), as_count(e.values[3])};
  } else if (key == "schedule") {
    expect(11);
    std::span<const float> v(e.values);
    try {
      meta.schedule = schedule_at_peak(as_count(v[0]), as_count(v[1]), std::bit_cast<double>(from_limbs(v.subspan(2, 4))),
                                       std::bit_cast<double>(from_limbs(v.subspan(6, 4))), as_count(v[10]));
    } catch (const std::invalid_argument& err) {
      throw CheckpointError(CheckpointError::Kind::format, std::string("checkpoint: bad schedule metadata: ") + err.what());
    }
  } else if (key == "head_scale") {
    expect(1);
    meta.head_scale = e.values[0];
  } else {
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: unknown metadata entry '" + key + "'");
  }
}

}  // namespace

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::teacher: return "teacher";
    case Stage::student: return "student";
    case Stage::finetuned: return "finetuned";
  }
  return "unknown";
}

bool CheckpointMeta::operator==(const CheckpointMeta& other) const {
  auto same_schedule = [](const std::optional<RadiusSchedule>& a, const std::optional<RadiusSchedule>& b) {
    if (a.has_value() != b.has_value()) return false;
    if (!a) return true;
    return a->r_max == b->r_max && a->r_min == b->r_min && a->lambda == b->lambda && a->threshold == b->threshold &&
           a->peak_index == b->peak_index && a->weights == b->weights;
  };
  return stage == other.stage && seed == other.seed && arch == other.arch && same_schedule(schedule, other.schedule) &&
         head_scale == other.head_scale;
}

const ParamEntry* ModelParams::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& model) {
  std::vector<ParamEntry> entries = model.params;
  for (auto& m : meta_entries(model.meta)) entries.push_back(std::move(m));

  std::set<std::string> names;
  io::Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) {
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: duplicate parameter name '" + e.name + "'");
    }
    if (e.name.size() > 0xFFFF || e.shape.size() > 0xFF) {
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: name or rank too large for '" + e.name + "'");
    }
    if (shape_numel(e.shape) != e.values.size()) {
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: '" + e.name + "' shape disagrees with payload");
    }
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  return w.take();
}

namespace {

ModelParams decode_entries(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) {
    throw CheckpointError(CheckpointError::Kind::format, "checkpoint: bad magic (expected LFFS)");
  }
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::format,
                          "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>("parameter count");
  ModelParams model;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    ParamEntry e;
    const auto name_len = r.le<std::uint16_t>("name length");
    e.name = r.str(name_len, "name");
    if (!names.insert(e.name).second) {
      throw CheckpointError(CheckpointError::Kind::format, "checkpoint: duplicate parameter name '" + e.name + "'");
    }
    const auto rank = r.le<std::uint8_t>("rank");
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.shape.push_back(r.le<std::uint32_t>("dimension"));
      const std::size_t dim = e.shape.back();
      const std::size_t cap = r.remaining() + 1;  // saturate: anything above cap is truncated anyway
      numel = (dim != 0 && numel > cap / dim) ? cap : numel * dim;
    }
    if (numel > r.remaining() / 4) throw io::Truncated("truncated while reading payload of '" + e.name + "'");
    e.values.resize(numel);
    for (auto& v : e.values) v = r.f32("payload");
    if (e.name.rfind(kMetaPrefix, 0) == 0) {
      apply_meta(model.meta, e);
    } else {
      model.params.push_back(std::move(e));
    }
  }
  if (!r.done()) throw CheckpointError(CheckpointError::Kind::format, "checkpoint: trailing bytes after last entry");
  return model;
}

}  // namespace

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  try {
    return decode_entries(bytes);
  } catch (const io::Truncated& err) {
    throw CheckpointError(CheckpointError::Kind::format, std::string("checkpoint ") + err.what());
  }
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  if (!io::write_file(path.string(), encode_checkpoint(params))) {
    throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint '" + path.string() + "'");
  }
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  bool ok = false;
  const auto bytes = io::read_file(path.string(), ok);
  if (!ok) throw CheckpointError(CheckpointError::Kind::io, "cannot open checkpoint '" + path.string() + "'");
  return decode_checkpoint(bytes);
}

template <typename T>
ModelParams export_params(const ConvNet<T>& net, const CosineHead<T>* head, CheckpointMeta meta) {
  ModelParams out;
  meta.arch = net.config();
  auto add = [&](const std::string& name, const Tensor<T>& t) {
    ParamEntry e{name, t.shape(), {}};
    e.values.reserve(t.numel());
    for (T v : t.data()) e.values.push_back(static_cast<float>(v));
    out.params.push_back(std::move(e));
  };
  for (const auto& item : net.state()) add(item.name, item.tensor);
  if (head) {
    add("head.weight", head->weight);
    meta.head_scale = static_cast<float>(head->scale);
  }
  out.meta = std::move(meta);
  return out;
}

namespace {

// "; parameter 'x' ..." for the first entry whose shape the network rejects.
template <typename T>
std::string first_shape_mismatch(const ModelParams& params, const ConvNet<T>& net) {
  for (const auto& item : net.state()) {
    const auto* e = params.find(item.name);
    if (!e) return "; parameter '" + item.name + "' is missing";
    if (e->shape != item.tensor.shape()) {
      return "; parameter '" + item.name + "' has shape " + shape_str(e->shape) + ", network expects " +
             shape_str(item.tensor.shape());
    }
  }
  return "";
}

}  // namespace

template <typename T>
void import_params(const ModelParams& params, ConvNet<T>& net, CosineHead<T>* head) {
  if (!(params.meta.arch == net.config())) {
    const auto& a = params.meta.arch;
    throw CheckpointError(CheckpointError::Kind::architecture,
                          "checkpoint architecture (channels=" + std::to_string(a.in_channels) +
                              " side=" + std::to_string(a.side) + " width=" + std::to_string(a.width) +
                              " classes=" + std::to_string(a.num_classes) + ") does not match the configured network" +
                              first_shape_mismatch(params, net));
  }
  std::vector<NamedTensor<T>> values;
  for (const auto& e : params.params) {
    if (e.name == "head.weight") continue;
    std::vector<T> v(e.values.begin(), e.values.end());
    values.push_back({e.name, Tensor<T>::from(e.shape, std::move(v))});
  }
  try {
    net.load_state(values);
  } catch (const ShapeError& err) {
    throw CheckpointError(CheckpointError::Kind::architecture, err.what());
  }
  if (head) {
    const auto* w = params.find("head.weight");
    if (!w || w->shape.size() != 2) {
      throw CheckpointError(CheckpointError::Kind::architecture, "checkpoint has no 'head.weight' [k x F] entry");
    }
    head->weight = Tensor<T>::from(w->shape, std::vector<T>(w->values.begin(), w->values.end()), true);
    if (params.meta.head_scale) head->scale = static_cast<T>(*params.meta.head_scale);
  }
}

template <typename T>
ConvNet<T> network_from_params(const ModelParams& params) {
  ConvNet<T> net(params.meta.arch);
  import_params<T>(params, net, nullptr);
  return net;
}

template ModelParams export_params(const ConvNet<float>&, const CosineHead<float>*, CheckpointMeta);
template ModelParams export_params(const ConvNet<double>&, const CosineHead<double>*, CheckpointMeta);
template void import_params(const ModelParams&, ConvNet<float>&, CosineHead<float>*);
template void import_params(const ModelParams&, ConvNet<double>&, CosineHead<double>*);
template ConvNet<float> network_from_params(const ModelParams&);
template ConvNet<double> network_from_params(const ModelParams&);

}  // namespace lffs
