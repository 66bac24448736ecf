#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <vector>

#include "fixtures.hpp"
#include "helpers.hpp"
#include "lffs/eval.hpp"
#include "lffs/losses.hpp"
#include "lffs/spectral.hpp"

using namespace lffs;
using lffs::test::trained;

namespace {

EvalSettings small_settings(std::size_t episodes) {
  EvalSettings s;
  s.episodes = episodes;
  s.seed = 31;
  s.episode.ways = 5;
  s.episode.shots = 1;
  s.episode.queries = 4;
  s.finetune.epochs = 2;
  s.finetune.optimizer.learning_rate = 1e-3;
  s.attack.iters = 3;
  s.inference = {InferenceKind::ensemble, 2};
  return s;
}

RadiusDistribution pl_weights() { return final_distribution(init_schedule(8, 2, 0.8, 0.98)); }

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lffs_test_eval";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::size_t lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("weighted sum of two radii by hand") {
  Rng rng(1);
  auto x = test::random_tensor({1, 1, 8, 8}, rng, 0, 1);
  RadiusDistribution w{{3, 1}, {0.6, 0.4}};
  const std::vector<std::vector<double>> preset{{1, 0}, {0, 2}};
  std::size_t call = 0;
  bool saw_right_inputs = true;
  ForwardFn<double> f = [&](const Tensor<double>& in) {
    const std::size_t r = w.radii.at(call);
    saw_right_inputs &= test::max_abs_diff(in.data(), low_pass(x, r).data()) == 0.0;
    return Tensor<double>::from({1, 2}, preset.at(call++));
  };
  auto out = ensemble_logits(f, x, w);
  CHECK(saw_right_inputs);
  CHECK(call == 2);
  CHECK(out.at(0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(out.at(1) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(argmax_rows(out) == std::vector<int>{1});
}

TEST_CASE("constant model and zero weights") {
  Rng rng(2);
  auto x = test::random_tensor({3, 2, 8, 8}, rng, 0, 1);
  ForwardFn<double> constant = [](const Tensor<double>& in) {
    return Tensor<double>::from({in.dim(0), 3}, std::vector<double>(in.dim(0) * 3, 1.5));
  };
  auto out = ensemble_logits(constant, x, pl_weights());
  for (double v : out.values()) CHECK(v == doctest::Approx(1.5).epsilon(1e-12));

  std::size_t calls = 0;
  ForwardFn<double> counting = [&](const Tensor<double>& in) {
    ++calls;
    return constant(in);
  };
  (void)ensemble_logits(counting, x, RadiusDistribution{{4, 3, 2}, {0.0, 1.0, 0.0}});
  CHECK(calls == 1);
}

TEST_CASE("degenerate weights equal single-radius inference") {
  auto net = trained().teacher.clone();
  net.set_bn_mode(BatchNormMode::frozen);
  FewShotModel<float> model{net, {}};
  Rng rng(3);
  std::vector<float> head(5 * net.config().num_classes);
  for (auto& v : head) v = float(test::uniform(1, rng)[0]);
  model.head.weight = Tensor<float>::from({5, net.config().num_classes}, head);
  auto x = to_tensor<float>(trained().data.novel.images.subset(std::vector<std::size_t>{0, 50, 100}));
  for (std::size_t r : {2u, 4u, 7u}) {
    auto ens = inference_forward(model, {InferenceKind::ensemble, 0}, RadiusDistribution::fixed(r));
    auto fixed = inference_forward(model, {InferenceKind::fixed_radius, r}, pl_weights());
    auto direct = model.forward(low_pass(x, r));
    CHECK(ens(x).values() == direct.values());
    CHECK(fixed(x).values() == direct.values());
  }
  auto plain = inference_forward(model, {InferenceKind::plain, 0}, pl_weights());
  CHECK(plain(x).values() == model.forward(x).values());
}

TEST_CASE("argmax ignores positive weight scaling") {
  Rng rng(4);
  auto net = trained().teacher.clone();
  net.set_bn_mode(BatchNormMode::frozen);
  ForwardFn<float> f = [&](const Tensor<float>& in) { return net.forward(in); };
  auto x = to_tensor<float>(trained().data.novel.images.subset(std::vector<std::size_t>{1, 2, 3, 60, 120}));
  auto w = pl_weights();
  const auto ref = argmax_rows(ensemble_logits(f, x, w));
  for (double c : {0.01, 0.5, 3.0, 250.0}) {
    auto scaled = w;
    for (auto& v : scaled.weights) v *= c;
    CHECK(argmax_rows(ensemble_logits(f, x, scaled)) == ref);
  }
}

TEST_CASE("aggregate mean and interval") {
  const std::vector<double> two{0.5, 0.7};
  auto a = aggregate(two);
  CHECK(a.mean == doctest::Approx(0.6));
  CHECK(a.ci95 == doctest::Approx(1.96 * std::sqrt(0.02) / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(a.ci95 == doctest::Approx(0.196).epsilon(1e-3));
  const std::vector<double> one{1.0};
  CHECK(aggregate(one).ci95 == 0.0);
  const std::vector<double> same{1.0, 1.0, 1.0};
  CHECK(aggregate(same).ci95 == 0.0);
  CHECK(aggregate(same).mean == 1.0);
}

TEST_CASE("zero budget gives robust equal to clean") {
  auto s = small_settings(4);
  s.attack.epsilon = 0;
  s.both_surfaces = true;
  auto report = evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "eps0");
  REQUIRE(report.surfaces.size() == 2);
  for (const auto& e : report.episodes) {
    CHECK(e.robust[0] == e.clean);
    CHECK(e.robust[1] == e.clean);
    CHECK(e.fooling_rate == 0.0);
    CHECK(e.max_deviation == 0.0);
  }
  CHECK(report.robust_mean() == report.clean.mean);
}

TEST_CASE("evaluation is reproducible and independent of worker count") {
  auto s = small_settings(3);
  auto a = evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "run");
  auto b = evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "run");
  s.workers = 3;
  auto c = evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "run");
  CHECK(report_csv(a) == report_csv(b));
  CHECK(report_csv(a) == report_csv(c));
  CHECK(report_json(a) == report_json(b));
  CHECK(report_json(a) == report_json(c));
  for (const auto& e : a.episodes) {
    CHECK(e.clean >= 0.0);
    CHECK(e.clean <= 1.0);
    CHECK(e.max_deviation <= s.attack.epsilon + 1e-7);
  }
}

TEST_CASE("report formats") {
  auto s = small_settings(2);
  auto report = evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "fmt");
  const auto csv = report_csv(report);
  CHECK(lines(csv) == 3);
  CHECK(csv.rfind("label,episode,seed,clean,robust_plain,fooling_rate\n", 0) == 0);
  auto doc = nlohmann::json::parse(report_json(report));
  CHECK(doc["label"] == "fmt");
  CHECK(doc["episodes"] == 2);
  CHECK(report_json(report).find("seconds") == std::string::npos);
  CHECK(timing_json(report).find("total_seconds") != std::string::npos);

  s.attack_enabled = false;
  auto clean_only = evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "clean");
  CHECK(clean_only.surfaces.empty());
  CHECK(clean_only.clean.mean == report.clean.mean);
}

TEST_CASE("failed episodes name their index and seed") {
  auto s = small_settings(2);
  s.episode.shots = 30;
  s.episode.queries = 15;
  try {
    (void)evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "bad");
    FAIL("episode with too few samples did not fail");
  } catch (const EpisodeFailed& err) {
    CHECK(err.index() == 0);
    CHECK(err.seed() == derive_seed(s.seed, 0));
    CHECK(std::string(err.what()).find("episode 0") != std::string::npos);
  }
}

TEST_CASE("adversarial batches can be dumped") {
  auto s = small_settings(1);
  s.adversarial_dir = scratch("adv");
  std::filesystem::create_directories(s.adversarial_dir);
  (void)evaluate(trained().teacher, pl_weights(), trained().data.novel, s, "dump");
  auto adv = load_dataset(s.adversarial_dir / "adv_0_plain.fsds");
  CHECK(adv.size() == 5 * 4);
  CHECK(adv.split == Split::novel);
  CHECK(adv.class_count == 5);
}

TEST_CASE("feature export") {
  auto net = trained().teacher.clone();
  net.set_bn_mode(BatchNormMode::frozen);
  const auto images = trained().data.novel.images.subset(std::vector<std::size_t>{0, 1, 2, 3});
  const std::vector<int> labels{0, 0, 1, 1};
  const auto path = scratch("features.fsds");
  export_features(net, images, path, labels);
  auto f = load_dataset(path);
  CHECK(f.split == Split::features);
  CHECK(f.size() == 4);
  CHECK(f.images.channels == net.config().feature_dim());
  CHECK(f.images.height == 1);
  CHECK(f.labels == labels);
  // same frozen model, same bytes
  const auto again = scratch("features2.fsds");
  export_features(net, images, again, labels);
  CHECK(encode_dataset(load_dataset(again)) == encode_dataset(f));

  ImageBatch empty{0, 3, 16, 16, {}};
  const auto none = scratch("empty.fsds");
  export_features(net, empty, none);
  CHECK(std::filesystem::file_size(none) == 4 + 4 * 6 + 1);
  CHECK(load_dataset(none).size() == 0);
}

}  // TEST_SUITE
