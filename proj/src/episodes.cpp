#include "lffs/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <unordered_set>

#include "binary_io.hpp"
#include "lffs/spectral.hpp"

namespace lffs {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'D', 'S'};

[[noreturn]] void fail(DatasetError::Kind kind, const std::string& message) { throw DatasetError(kind, message); }

// Real field on a d×d grid whose spectrum is random inside [inner, outer)
// and zero elsewhere, scaled to peak absolute value 1.
std::vector<double> band_limited_field(std::size_t side, double inner, double outer, Rng& rng) {
  Spectrum spec;
  spec.side = side;
  spec.channels = 1;
  spec.coeffs.assign(side * side, {0.0, 0.0});
  std::normal_distribution<double> normal(0.0, 1.0);
  const double centre = static_cast<double>(side / 2);
  for (std::size_t p = 0; p < side; ++p) {
    for (std::size_t q = 0; q < side; ++q) {
      const double dist = std::hypot(static_cast<double>(p) - centre, static_cast<double>(q) - centre);
      if (dist < inner || dist >= outer) continue;
      spec.at(0, p, q) = {normal(rng), normal(rng)};
    }
  }
  // Conjugate symmetry X[-u,-v] = conj(X[u,v]) makes the inverse real.
  Spectrum sym = spec;
  for (std::size_t p = 0; p < side; ++p) {
    for (std::size_t q = 0; q < side; ++q) {
      sym.at(0, p, q) = 0.5 * (spec.at(0, p, q) + std::conj(spec.at(0, (side - p) % side, (side - q) % side)));
    }
  }
  const auto plane = idft2d_complex(sym);
  std::vector<double> out(side * side);
  double peak = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = plane[i].real();
    peak = std::max(peak, std::abs(out[i]));
  }
  if (peak > 0.0)
    for (auto& v : out) v /= peak;
  return out;
}

std::uint64_t hash_image(std::span<const float> image) {
  std::uint64_t h = 1469598103934665603ull;
  for (float v : image) {
    h ^= std::bit_cast<std::uint32_t>(v);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void ImageBatch::append(std::span<const float> image) {
  if (image.size() != image_size()) {
    throw ShapeError("ImageBatch::append", Shape{image.size()}, Shape{channels, height, width});
  }
  pixels.insert(pixels.end(), image.begin(), image.end());
  ++count;
}

ImageBatch ImageBatch::subset(std::span<const std::size_t> indices) const {
  ImageBatch out{0, channels, height, width, {}};
  out.pixels.reserve(indices.size() * image_size());
  for (std::size_t i : indices) {
    if (i >= count) throw std::out_of_range("ImageBatch::subset: index " + std::to_string(i) + " >= " + std::to_string(count));
    out.append(image(i));
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const ImageBatch& batch) {
  return Tensor<T>::from({batch.count, batch.channels, batch.height, batch.width},
                         std::vector<T>(batch.pixels.begin(), batch.pixels.end()));
}

template <typename T>
ImageBatch from_tensor(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("from_tensor", "expected [N x C x H x W], got " + shape_str(x.shape()));
  ImageBatch out{x.dim(0), x.dim(1), x.dim(2), x.dim(3), {}};
  out.pixels.assign(x.data().begin(), x.data().end());
  return out;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::base: return "base";
    case Split::novel: return "novel";
    case Split::features: return "features";
  }
  return "unknown";
}

void Dataset::validate() const {
  if (images.count != labels.size()) {
    fail(DatasetError::Kind::invariant, "dataset: " + std::to_string(images.count) + " images but " +
                                            std::to_string(labels.size()) + " labels");
  }
  if (images.pixels.size() != images.count * images.image_size()) {
    fail(DatasetError::Kind::invariant, "dataset: pixel buffer does not match N*C*H*W");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
      fail(DatasetError::Kind::invariant, "dataset: label " + std::to_string(labels[i]) + " at index " +
                                              std::to_string(i) + " is not below class count " +
                                              std::to_string(class_count));
    }
  }
  for (std::size_t i = 0; i < images.pixels.size(); ++i) {
    const float v = images.pixels[i];
    const bool ok = split == Split::features ? std::isfinite(v) : (v >= 0.0f && v <= 1.0f);
    if (!ok) {
      fail(DatasetError::Kind::invariant,
           "dataset: value " + std::to_string(v) + " at flat index " + std::to_string(i) +
               (split == Split::features ? " is not finite" : " is outside [0, 1]"));
    }
  }
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  dataset.validate();
  if (dataset.class_count > 0x10000) fail(DatasetError::Kind::format, "dataset: more classes than u16 labels hold");
  const auto& im = dataset.images;
  io::Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kDatasetVersion);
  for (std::size_t v : {im.count, im.channels, im.height, im.width, dataset.class_count}) {
    if (v > 0xFFFFFFFFull) fail(DatasetError::Kind::format, "dataset: dimension exceeds u32");
    w.le<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.le<std::uint8_t>(static_cast<std::uint8_t>(dataset.split));
  for (int y : dataset.labels) w.le<std::uint16_t>(static_cast<std::uint16_t>(y));
  for (float v : im.pixels) w.f32(v);
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  Dataset out;
  try {
    io::Reader r(bytes);
    if (r.str(4, "magic") != std::string(kMagic, 4)) fail(DatasetError::Kind::format, "dataset: bad magic (expected FSDS)");
    const auto version = r.le<std::uint32_t>("version");
    if (version != kDatasetVersion) {
      fail(DatasetError::Kind::format, "dataset: unsupported version " + std::to_string(version));
    }
    auto& im = out.images;
    im.count = r.le<std::uint32_t>("N");
    im.channels = r.le<std::uint32_t>("C");
    im.height = r.le<std::uint32_t>("H");
    im.width = r.le<std::uint32_t>("W");
    out.class_count = r.le<std::uint32_t>("class count");
    const auto tag = r.le<std::uint8_t>("split tag");
    if (tag > 2) fail(DatasetError::Kind::format, "dataset: unknown split tag " + std::to_string(tag));
    out.split = static_cast<Split>(tag);
    // Check sizes against the bytes present before allocating anything.
    const long double expected = 2.0L * im.count + 4.0L * im.count * im.channels * im.height * im.width;
    if (expected != static_cast<long double>(r.remaining())) {
      if (expected > static_cast<long double>(r.remaining())) throw io::Truncated("truncated: header promises more data than present");
      fail(DatasetError::Kind::format, "dataset: trailing bytes after pixel payload");
    }
    out.labels.resize(im.count);
    for (auto& y : out.labels) y = r.le<std::uint16_t>("labels");
    im.pixels.resize(im.count * im.image_size());
    for (auto& v : im.pixels) v = r.f32("pixels");
  } catch (const io::Truncated& err) {
    fail(DatasetError::Kind::format, std::string("dataset ") + err.what());
  }
  out.validate();
  return out;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  if (!io::write_file(path.string(), encode_dataset(dataset))) {
    fail(DatasetError::Kind::io, "cannot write dataset '" + path.string() + "'");
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  bool ok = false;
  const auto bytes = io::read_file(path.string(), ok);
  if (!ok) fail(DatasetError::Kind::io, "cannot open dataset '" + path.string() + "'");
  return decode_dataset(bytes);
}

void require_disjoint(const Dataset& base, const Dataset& novel) {
  if (base.split != Split::base || novel.split != Split::novel) {
    fail(DatasetError::Kind::invariant, "datasets carry split tags " + to_string(base.split) + "/" +
                                            to_string(novel.split) + ", expected base/novel");
  }
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < base.size(); ++i) seen.insert(hash_image(base.images.image(i)));
  for (std::size_t i = 0; i < novel.size(); ++i) {
    if (!seen.count(hash_image(novel.images.image(i)))) continue;
    const auto img = novel.images.image(i);
    for (std::size_t j = 0; j < base.size(); ++j) {
      const auto other = base.images.image(j);
      if (std::equal(img.begin(), img.end(), other.begin(), other.end())) {
        fail(DatasetError::Kind::invariant,
             "novel image " + std::to_string(i) + " also appears in the base set at " + std::to_string(j));
      }
    }
  }
}

void SyntheticConfig::validate() const {
  auto bad = [](const std::string& m) { fail(DatasetError::Kind::invariant, "synthetic config: " + m); };
  if (side < 2 || side % 2) bad("side must be even and at least 2");
  if (channels == 0) bad("channels must be positive");
  if (novel_classes < 2 || classes < novel_classes + 2) bad("need at least 2 novel and 2 base classes");
  if (per_class == 0) bad("per_class must be positive");
  if (low_freq_signal_radius < 2 || low_freq_signal_radius > side / 2) bad("low_freq_signal_radius must lie in [2, side/2]");
  if (hf_radius > full_pass_radius(side)) bad("hf_radius exceeds the largest frequency distance");
  for (double a : {noise_amp, template_amp, jitter_amp, class_hf_amp}) {
    if (!(a >= 0.0 && a <= 1.0)) bad("amplitudes must lie in [0, 1]");
  }
}

SyntheticData generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.side, plane = d * d, C = config.channels;
  const auto signal = static_cast<double>(config.low_freq_signal_radius);
  const double top = static_cast<double>(d);  // above every distance on the grid

  // Templates and high-frequency patterns per class, then samples, each from
  // its own stream so changing per_class leaves the templates unchanged.
  std::vector<std::vector<double>> templates(config.classes), patterns(config.classes);
  for (std::size_t k = 0; k < config.classes; ++k) {
    Rng rng(derive_seed(seed, k));
    for (std::size_t c = 0; c < C; ++c) {
      // Radius 1 excludes only the zero frequency: no class differs in mean colour.
      auto t = band_limited_field(d, 1.0, signal, rng);
      templates[k].insert(templates[k].end(), t.begin(), t.end());
    }
    for (std::size_t c = 0; c < C; ++c) {
      auto h = band_limited_field(d, static_cast<double>(config.hf_radius), top, rng);
      patterns[k].insert(patterns[k].end(), h.begin(), h.end());
    }
  }

  // Shuffle class ids so the novel split is not simply the last classes.
  std::vector<std::size_t> order(config.classes);
  std::iota(order.begin(), order.end(), 0);
  {
    Rng rng(derive_seed(seed, 0x5eed0000ull));
    std::shuffle(order.begin(), order.end(), rng);
  }
  const std::size_t base_classes = config.classes - config.novel_classes;

  SyntheticData out;
  for (auto* ds : {&out.base, &out.novel}) {
    ds->images = ImageBatch{0, C, d, d, {}};
    ds->split = ds == &out.base ? Split::base : Split::novel;
    ds->class_count = ds == &out.base ? base_classes : config.novel_classes;
    ds->images.pixels.reserve(ds->class_count * config.per_class * C * plane);
  }
  std::vector<float> image(C * plane);
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  for (std::size_t slot = 0; slot < config.classes; ++slot) {
    const std::size_t k = order[slot];
    Dataset& ds = slot < base_classes ? out.base : out.novel;
    const int label = static_cast<int>(slot < base_classes ? slot : slot - base_classes);
    Rng rng(derive_seed(seed, 0x10000ull + k));
    for (std::size_t n = 0; n < config.per_class; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const auto jitter = config.jitter_amp > 0.0 ? band_limited_field(d, 1.0, signal, rng) : std::vector<double>(plane, 0.0);
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = 0.5 + config.template_amp * templates[k][c * plane + i] + config.jitter_amp * jitter[i] +
                           config.class_hf_amp * patterns[k][c * plane + i] + config.noise_amp * noise(rng);
          image[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
      ds.images.append(image);
      ds.labels.push_back(label);
    }
  }
  out.base.validate();
  out.novel.validate();
  require_disjoint(out.base, out.novel);
  return out;
}

SampledEpisode sample_episode(const Dataset& novel, std::size_t ways, std::span<const std::size_t> shots,
                              std::size_t queries, Rng& rng) {
  if (ways < 2 || shots.size() != ways) {
    throw std::invalid_argument("sample_episode: need k >= 2 and one shot count per class (k=" + std::to_string(ways) +
                                ", counts=" + std::to_string(shots.size()) + ")");
  }
  if (ways > novel.class_count) {
    fail(DatasetError::Kind::insufficient, "sample_episode: " + std::to_string(ways) + "-way episode from " +
                                               std::to_string(novel.class_count) + " classes");
  }
  for (std::size_t s : shots)
    if (s == 0) throw std::invalid_argument("sample_episode: every class needs at least one support sample");

  std::vector<std::vector<std::size_t>> by_class(novel.class_count);
  for (std::size_t i = 0; i < novel.size(); ++i) by_class[novel.labels[i]].push_back(i);

  std::vector<std::size_t> classes(novel.class_count);
  std::iota(classes.begin(), classes.end(), 0);
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(ways);

  std::vector<std::size_t> support_idx, query_idx;
  std::vector<int> support_labels, query_labels;
  for (std::size_t j = 0; j < ways; ++j) {
    auto pool = by_class[classes[j]];
    if (pool.size() < shots[j] + queries) {
      fail(DatasetError::Kind::insufficient, "sample_episode: class " + std::to_string(classes[j]) + " has " +
                                                 std::to_string(pool.size()) + " samples, episode needs " +
                                                 std::to_string(shots[j] + queries));
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < shots[j]; ++i) {
      support_idx.push_back(pool[i]);
      support_labels.push_back(static_cast<int>(j));
    }
    for (std::size_t i = 0; i < queries; ++i) {
      query_idx.push_back(pool[shots[j] + i]);
      query_labels.push_back(static_cast<int>(j));
    }
  }
  // Interleave the query set so its order carries no label information.
  std::vector<std::size_t> perm(query_idx.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> q_sorted(perm.size());
  std::vector<int> y_sorted(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    q_sorted[i] = query_idx[perm[i]];
    y_sorted[i] = query_labels[perm[i]];
  }

  SampledEpisode out;
  out.episode.ways = ways;
  out.episode.support = novel.images.subset(support_idx);
  out.episode.support_labels = std::move(support_labels);
  out.episode.query = novel.images.subset(q_sorted);
  out.query_labels = SealedLabels(std::move(y_sorted));
  for (std::size_t c : classes) out.classes.push_back(static_cast<int>(c));
  return out;
}

SampledEpisode sample_episode(const Dataset& novel, std::size_t ways, std::size_t shots, std::size_t queries,
                              Rng& rng) {
  const std::vector<std::size_t> counts(ways, shots);
  return sample_episode(novel, ways, counts, queries, rng);
}

template Tensor<float> to_tensor(const ImageBatch&);
template Tensor<double> to_tensor(const ImageBatch&);
template ImageBatch from_tensor(const Tensor<float>&);
template ImageBatch from_tensor(const Tensor<double>&);

}  // namespace lffs
