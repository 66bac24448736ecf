#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "lffs/episodes.hpp"
#include "lffs/spectral.hpp"

namespace lffs {

// Test-only view of sealed query labels.
struct LabelAudit {
  static const std::vector<int>& read(const SealedLabels& sealed) { return sealed.labels_; }
};

}  // namespace lffs

using namespace lffs;

namespace {

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.classes = 9;
  c.novel_classes = 5;
  c.per_class = 24;
  c.side = 16;
  c.low_freq_signal_radius = 3;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lffs_test_episodes";
  std::filesystem::create_directories(dir);
  return dir / name;
}

double sq_dist(std::span<const float> a, std::span<const float> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += double(a[i] - b[i]) * double(a[i] - b[i]);
  return d;
}

// Index in `ds` of an image equal to `img`, or ds.size().
std::size_t find_image(const Dataset& ds, std::span<const float> img) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto other = ds.images.image(i);
    if (std::equal(img.begin(), img.end(), other.begin(), other.end())) return i;
  }
  return ds.size();
}

}  // namespace

TEST_SUITE("episodes") {

TEST_CASE("generator shapes, ranges and split tags") {
  auto data = generate_synthetic(small_config(), 1);
  CHECK(data.base.class_count == 4);
  CHECK(data.novel.class_count == 5);
  CHECK(data.base.size() == 4 * 24);
  CHECK(data.novel.size() == 5 * 24);
  CHECK(data.base.split == Split::base);
  CHECK(data.novel.split == Split::novel);
  for (const auto* ds : {&data.base, &data.novel}) {
    CHECK(ds->images.channels == 3);
    CHECK(ds->images.height == 16);
    for (float v : ds->images.pixels) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK_NOTHROW(require_disjoint(data.base, data.novel));
}

TEST_CASE("same seed gives identical datasets, another seed does not") {
  auto a = generate_synthetic(small_config(), 7);
  auto b = generate_synthetic(small_config(), 7);
  auto c = generate_synthetic(small_config(), 8);
  CHECK(a.base == b.base);
  CHECK(a.novel == b.novel);
  CHECK_FALSE(a.base == c.base);
}

TEST_CASE("noise free data is solved by the nearest template") {
  auto cfg = small_config();
  cfg.noise_amp = 0;
  cfg.jitter_amp = 0;
  auto data = generate_synthetic(cfg, 3);
  for (const auto* ds : {&data.base, &data.novel}) {
    // every sample of a class is its template; take the first as reference
    std::vector<std::size_t> first(ds->class_count, ds->size());
    for (std::size_t i = 0; i < ds->size(); ++i)
      if (first[ds->labels[i]] == ds->size()) first[ds->labels[i]] = i;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds->size(); ++i) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < ds->class_count; ++c) {
        const double d = sq_dist(ds->images.image(i), ds->images.image(first[c]));
        if (d < best_d) best_d = d, best = c;
      }
      hits += best == std::size_t(ds->labels[i]);
    }
    CHECK(hits == ds->size());
  }
}

TEST_CASE("noisy data is still solved by class means") {
  auto data = generate_synthetic(small_config(), 4);
  const auto& ds = data.novel;
  const std::size_t n = ds.images.image_size();
  std::vector<double> means(ds.class_count * n, 0.0);
  std::vector<std::size_t> counts(ds.class_count, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ++counts[ds.labels[i]];
    auto img = ds.images.image(i);
    for (std::size_t k = 0; k < n; ++k) means[ds.labels[i] * n + k] += img[k];
  }
  for (std::size_t c = 0; c < ds.class_count; ++c)
    for (std::size_t k = 0; k < n; ++k) means[c * n + k] /= double(counts[c]);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto img = ds.images.image(i);
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < ds.class_count; ++c) {
      double d = 0;
      for (std::size_t k = 0; k < n; ++k) d += (img[k] - means[c * n + k]) * (img[k] - means[c * n + k]);
      if (d < best_d) best_d = d, best = c;
    }
    hits += best == std::size_t(ds.labels[i]);
  }
  CHECK(double(hits) / double(ds.size()) > 0.9);
}

TEST_CASE("low pass at the signal radius keeps the template energy") {
  auto cfg = small_config();
  cfg.noise_amp = 0;
  cfg.jitter_amp = 0;
  auto data = generate_synthetic(cfg, 5);
  const auto& ds = data.base;
  const std::size_t n = ds.images.image_size();
  for (std::size_t c = 0; c < ds.class_count; ++c) {
    const std::size_t i = c * cfg.per_class;
    auto img = ds.images.image(i);
    std::vector<double> px(img.begin(), img.end());
    auto x = Tensor<double>::from({1, 3, 16, 16}, px);
    auto xl = low_pass(x, cfg.low_freq_signal_radius);
    // energy of the template about each channel's mean
    double total = 0, kept = 0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double mean = 0;
      for (std::size_t k = 0; k < 256; ++k) mean += px[ch * 256 + k];
      mean /= 256;
      for (std::size_t k = 0; k < 256; ++k) {
        total += (px[ch * 256 + k] - mean) * (px[ch * 256 + k] - mean);
        kept += (xl.at(ch * 256 + k) - mean) * (xl.at(ch * 256 + k) - mean);
      }
    }
    REQUIRE(n == 768);
    CHECK(total > 0);
    CHECK(kept / total >= 0.99);
  }
}

TEST_CASE("invalid generator configs are rejected") {
  auto odd = small_config();
  odd.side = 15;
  CHECK_THROWS_AS(generate_synthetic(odd, 1), DatasetError);
  auto few = small_config();
  few.classes = 6;
  CHECK_THROWS_AS(generate_synthetic(few, 1), DatasetError);
  auto loud = small_config();
  loud.noise_amp = 2;
  CHECK_THROWS_AS(generate_synthetic(loud, 1), DatasetError);
}

TEST_CASE("disjointness check catches shared images and wrong tags") {
  auto data = generate_synthetic(small_config(), 6);
  Dataset leaky = data.novel;
  leaky.images.pixels.assign(data.base.images.pixels.begin(), data.base.images.pixels.begin() + leaky.images.pixels.size());
  CHECK_THROWS_AS(require_disjoint(data.base, leaky), DatasetError);
  CHECK_THROWS_AS(require_disjoint(data.novel, data.base), DatasetError);
}

TEST_CASE("dataset file round trip and damage") {
  auto data = generate_synthetic(small_config(), 9);
  const auto path = scratch("novel.fsds");
  save_dataset(data.novel, path);
  CHECK(load_dataset(path) == data.novel);
  auto bytes = encode_dataset(data.novel);
  CHECK(decode_dataset(bytes) == data.novel);
  CHECK(bytes.size() == 4 + 4 * 6 + 1 + 2 * data.novel.size() + 4 * data.novel.images.pixels.size());

  std::span<const std::uint8_t> truncated(bytes.data(), bytes.size() - 5);
  CHECK_THROWS_AS(decode_dataset(truncated), DatasetError);
  std::span<const std::uint8_t> header_only(bytes.data(), 10);
  CHECK_THROWS_AS(decode_dataset(header_only), DatasetError);

  auto magic = bytes;
  magic[1] = 'X';
  CHECK_THROWS_AS(decode_dataset(magic), DatasetError);
  auto version = bytes;
  version[4] = 7;
  CHECK_THROWS_AS(decode_dataset(version), DatasetError);

  // first label set to class_count
  auto label = bytes;
  const std::size_t label_at = 4 + 4 * 6 + 1;
  label[label_at] = static_cast<std::uint8_t>(data.novel.class_count);
  label[label_at + 1] = 0;
  CHECK_THROWS_AS(decode_dataset(label), DatasetError);

  auto pixel = data.novel;
  pixel.images.pixels[3] = 1.5f;
  CHECK_THROWS_AS(pixel.validate(), DatasetError);

  CHECK_THROWS_AS(load_dataset(scratch("missing.fsds")), DatasetError);
}

TEST_CASE("episode sizes") {
  auto data = generate_synthetic(small_config(), 10);
  Rng rng(1);
  auto ep = sample_episode(data.novel, 5, 1, 15, rng);
  CHECK(ep.episode.support.count == 5);
  CHECK(ep.episode.query.count == 75);
  CHECK(ep.query_labels.size() == 75);

  const std::vector<std::size_t> shots{4, 5, 3, 5, 5};
  auto uneven = sample_episode(data.novel, 5, shots, 2, rng);
  CHECK(uneven.episode.support.count == 22);
  for (std::size_t j = 0; j < 5; ++j)
    CHECK(std::size_t(std::count(uneven.episode.support_labels.begin(), uneven.episode.support_labels.end(), int(j))) ==
          shots[j]);
}

TEST_CASE("episode labels are remapped and consistent with the dataset") {
  auto data = generate_synthetic(small_config(), 11);
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto ep = sample_episode(data.novel, 3, 2, 4, rng);
    std::set<int> covered(ep.episode.support_labels.begin(), ep.episode.support_labels.end());
    CHECK(covered == std::set<int>{0, 1, 2});
    CHECK(std::set<int>(ep.classes.begin(), ep.classes.end()).size() == 3);
    for (std::size_t i = 0; i < ep.episode.support.count; ++i) {
      const auto at = find_image(data.novel, ep.episode.support.image(i));
      REQUIRE(at < data.novel.size());
      CHECK(data.novel.labels[at] == ep.classes[ep.episode.support_labels[i]]);
    }
    const auto& truth = LabelAudit::read(ep.query_labels);
    for (std::size_t i = 0; i < ep.episode.query.count; ++i) {
      const auto at = find_image(data.novel, ep.episode.query.image(i));
      REQUIRE(at < data.novel.size());
      CHECK(data.novel.labels[at] == ep.classes[truth[i]]);
      // support and query never share a sample
      for (std::size_t s = 0; s < ep.episode.support.count; ++s)
        CHECK(sq_dist(ep.episode.query.image(i), ep.episode.support.image(s)) > 0);
    }
  }
}

TEST_CASE("insufficient samples") {
  auto data = generate_synthetic(small_config(), 12);
  Rng rng(3);
  CHECK_THROWS_AS(sample_episode(data.novel, 5, 10, 15, rng), DatasetError);
  CHECK_THROWS_AS(sample_episode(data.novel, 6, 1, 1, rng), DatasetError);
  CHECK_THROWS_AS(sample_episode(data.novel, 1, 1, 1, rng), std::invalid_argument);
}

TEST_CASE("episode sampling is reproducible") {
  auto data = generate_synthetic(small_config(), 13);
  Rng a(99), b(99);
  for (int i = 0; i < 5; ++i) {
    auto x = sample_episode(data.novel, 5, 1, 3, a);
    auto y = sample_episode(data.novel, 5, 1, 3, b);
    CHECK(x.episode.support == y.episode.support);
    CHECK(x.episode.query == y.episode.query);
    CHECK(x.classes == y.classes);
    CHECK(LabelAudit::read(x.query_labels) == LabelAudit::read(y.query_labels));
  }
}

TEST_CASE("class frequency over 1000 episodes is near uniform") {
  auto data = generate_synthetic(small_config(), 14);
  Rng rng(4);
  std::vector<double> seen(5, 0.0);
  const std::size_t episodes = 1000, ways = 3;
  for (std::size_t e = 0; e < episodes; ++e) {
    auto ep = sample_episode(data.novel, ways, 1, 1, rng);
    for (int c : ep.classes) seen[c] += 1;
  }
  const double p = double(ways) / 5.0;
  const double mu = episodes * p, sigma = std::sqrt(episodes * p * (1 - p));
  for (double count : seen) CHECK(std::abs(count - mu) < 3 * sigma);
}

TEST_CASE("image batches") {
  ImageBatch b{0, 1, 2, 2, {}};
  const std::vector<float> img{0.1f, 0.2f, 0.3f, 0.4f};
  b.append(img);
  b.append(img);
  CHECK(b.count == 2);
  const std::vector<std::size_t> pick{1};
  CHECK(b.subset(pick).count == 1);
  const std::vector<std::size_t> out_of_range{2};
  CHECK_THROWS_AS(b.subset(out_of_range), std::out_of_range);
  const std::vector<float> wrong{0.1f};
  CHECK_THROWS_AS(b.append(wrong), ShapeError);
  auto t = to_tensor<double>(b);
  CHECK(t.shape() == Shape{2, 1, 2, 2});
  CHECK(from_tensor(t) == b);
}

}  // TEST_SUITE
