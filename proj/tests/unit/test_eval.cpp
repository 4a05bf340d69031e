#include <doctest.h>

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "helpers.hpp"
#include "scalenet/eval.hpp"
#include "scalenet/pretext.hpp"
#include "scalenet/tensor_bridge.hpp"

using namespace scalenet;

namespace {

BackboneSpec tiny_spec() {
  BackboneSpec s;
  s.width = 4;
  return s;
}

const ModelCheckpoint& trained_checkpoint() {
  static const ModelCheckpoint ck = [] {
    enable_deterministic_mode();
    const auto& d = testutil::tiny_labeled();
    OptimizerConfig opt;
    opt.batch_images = 32;
    const auto r = train_scalenet_chain(tiny_spec(), make_schedule({1}, {0.05}, {3}, opt),
                                        ImageSet(d.images.begin(), d.images.begin() + 256), 1);
    return r.checkpoints.back();
  }();
  return ck;
}

ModelCheckpoint random_checkpoint() {
  auto m = build_backbone(tiny_spec(), 77);
  CheckpointMeta meta;
  meta.width = 4;
  return extract_checkpoint(m, meta);
}

std::pair<LabeledImages, LabeledImages> split() {
  const auto& d = testutil::tiny_labeled();
  LabeledImages train, test;
  train.class_names = test.class_names = d.class_names;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto& dst = i < 240 ? train : test;
    dst.images.push_back(d.images[i]);
    dst.labels.push_back(d.labels[i]);
  }
  return {train, test};
}

DownstreamConfig short_probe() {
  auto c = probe_defaults();
  c.epochs = 6;
  c.lr.milestones = {3};
  c.batch_size = 64;
  return c;
}

}  // namespace

TEST_SUITE("subsample") {
  TEST_CASE("sorted, unique, deterministic") {
    const auto a = subsample(1000, 100, 3);
    CHECK(a.indices.size() == 100);
    CHECK(std::is_sorted(a.indices.begin(), a.indices.end()));
    CHECK(std::set<std::size_t>(a.indices.begin(), a.indices.end()).size() == 100);
    CHECK(subsample(1000, 100, 3).indices == a.indices);
    CHECK(subsample(1000, 100, 4).indices != a.indices);
    std::vector<std::size_t> all(50);
    std::iota(all.begin(), all.end(), 0);
    CHECK(subsample(50, 50, 1).indices == all);
    CHECK_THROWS_AS(subsample(10, 11, 0), ArgumentError);
  }

  TEST_CASE("4000 of 50000 balanced labels keeps every class in [300, 500]") {
    const auto s = subsample(50000, 4000, 0);
    std::vector<int> counts(10, 0);
    for (auto i : s.indices) ++counts[i % 10];
    for (int c : counts) {
      CHECK(c >= 300);
      CHECK(c <= 500);
    }
  }

  TEST_CASE("inclusion frequency is uniform") {
    std::vector<int> hits(20, 0);
    for (std::uint64_t seed = 0; seed < 1000; ++seed)
      for (auto i : subsample(20, 10, seed).indices) ++hits[i];
    for (int h : hits) CHECK(std::abs(h / 1000.0 - 0.5) < 0.05);
  }

  TEST_CASE("take keeps labels aligned") {
    const auto& d = testutil::tiny_labeled();
    const auto s = subsample(d.size(), 17, 2);
    const auto t = take(d, s);
    REQUIRE(t.size() == 17);
    for (std::size_t k = 0; k < 17; ++k) {
      CHECK(t.labels[k] == d.labels[s.indices[k]]);
      CHECK(t.images[k] == d.images[s.indices[k]]);
    }
  }
}

TEST_SUITE("report") {
  TEST_CASE("accuracy must match per-class accuracies") {
    EvalReport r;
    r.accuracy = 0.5;
    r.per_class_acc = {1.0, 0.0};
    r.class_counts = {10, 10};
    CHECK_NOTHROW(r.validate());
    r.accuracy = 0.6;
    CHECK_THROWS_AS(r.validate(), ArgumentError);
    r.accuracy = 0.75;
    r.class_counts = {15, 5};
    CHECK_NOTHROW(r.validate());
  }

  TEST_CASE("json round trip") {
    EvalReport r;
    r.protocol = Protocol::linear_probe;
    r.probe_block = "block2";
    r.accuracy = 0.25;
    r.per_class_acc = {0.5, 0.0};
    r.class_counts = {2, 2};
    r.config_digest = "d";
    r.seed = 9;
    r.n_train = 40;
    const auto back = EvalReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());
    CHECK(back.probe_block == r.probe_block);
  }

  TEST_CASE("ladder defaults") {
    CHECK(finetune_defaults().lr.initial_lr == 0.001);
    CHECK(finetune_defaults().lr.milestones == std::vector<int>{80, 160, 200});
    CHECK(probe_defaults().lr.initial_lr == 0.01);
    CHECK(probe_defaults().lr.milestones == std::vector<int>{5, 15, 25});
    CHECK(probe_defaults().epochs == 30);
  }
}

TEST_SUITE("linear probe") {
  TEST_CASE("pool size stays within 2048 features") {
    CHECK(probe_pool_size(64, 32) == 5);
    CHECK(probe_pool_size(512, 4) == 2);
    CHECK(probe_pool_size(2048, 4) == 1);
    CHECK(probe_pool_size(8, 2) == 2);
    for (int c : {3, 16, 96, 384})
      for (int s : {2, 8, 16}) CHECK(c * probe_pool_size(c, s) * probe_pool_size(c, s) <= std::max(2048, c));
  }

  TEST_CASE("deterministic, checkpoint untouched, valid report") {
    enable_deterministic_mode();
    const auto [train, test] = split();
    const auto ck = trained_checkpoint();
    const auto a = linear_probe(ck, train, test, "block2", short_probe(), 5);
    const auto b = linear_probe(ck, train, test, "block2", short_probe(), 5);
    CHECK(ck == trained_checkpoint());
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.per_class_acc == b.per_class_acc);
    CHECK_NOTHROW(a.validate());
    CHECK(a.probe_block == std::optional<std::string>("block2"));
    CHECK(a.n_train == 240);
    CHECK(a.class_counts.size() == 10);
  }

  TEST_CASE("class relabeling permutes nothing but the names") {
    enable_deterministic_mode();
    auto [train, test] = split();
    const auto ck = trained_checkpoint();
    const auto base = linear_probe(ck, train, test, "block3", short_probe(), 2);
    const std::vector<int> perm{3, 7, 0, 9, 1, 5, 2, 8, 6, 4};
    for (auto& y : train.labels) y = perm[static_cast<std::size_t>(y)];
    for (auto& y : test.labels) y = perm[static_cast<std::size_t>(y)];
    const auto moved = linear_probe(ck, train, test, "block3", short_probe(), 2);
    CHECK(std::abs(moved.accuracy - base.accuracy) <= 2.0 / static_cast<double>(test.size()));
  }

  TEST_CASE("every block of a five-block trunk") {
    BackboneSpec s;
    s.arch = Arch::alexnet_style;
    s.width = 4;
    auto m = build_backbone(s, 1);
    CheckpointMeta meta;
    meta.arch = Arch::alexnet_style;
    meta.width = 4;
    const auto [train, test] = split();
    auto cfg = short_probe();
    cfg.epochs = 1;
    const auto reports = probe_all_blocks(extract_checkpoint(m, meta), train, test, cfg, 1);
    REQUIRE(reports.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(*reports[i].probe_block == default_block_names(Arch::alexnet_style)[i]);
  }

  TEST_CASE("unknown block and bad labels") {
    const auto [train, test] = split();
    CHECK_THROWS_AS(linear_probe(random_checkpoint(), train, test, "block9", short_probe(), 0), ArgumentError);
    auto bad = train;
    bad.labels[0] = 42;
    CHECK_THROWS_AS(linear_probe(random_checkpoint(), bad, test, "block1", short_probe(), 0), ArgumentError);
  }
}

TEST_SUITE("finetune") {
  TEST_CASE("deterministic with a tuned checkpoint") {
    enable_deterministic_mode();
    const auto [train, test] = split();
    auto cfg = finetune_defaults();
    cfg.epochs = 2;
    cfg.batch_size = 64;
    ModelCheckpoint tuned_a, tuned_b;
    const auto a = finetune_classifier(trained_checkpoint(), train, test, cfg, 3, &tuned_a);
    const auto b = finetune_classifier(trained_checkpoint(), train, test, cfg, 3, &tuned_b);
    CHECK(a.accuracy == b.accuracy);
    CHECK(tuned_a == tuned_b);
    CHECK(tuned_a.meta.head_out == 10);
    CHECK(tuned_a.conv_weights != trained_checkpoint().conv_weights);
    CHECK(a.protocol == Protocol::finetune);
    CHECK_NOTHROW(a.validate());
  }
}

TEST_SUITE("gradcam") {
  TEST_CASE("maps lie in [0, 1] at input resolution") {
    auto m = transfer_weights(trained_checkpoint(), tiny_spec(), false, 0);
    const auto& d = testutil::tiny_labeled();
    const auto img = standardize(ImageSet(d.images.begin(), d.images.begin() + 8)).images[3];
    for (const auto& block : m->block_names()) {
      const auto map = gradcam(m, img, block, 1);
      CHECK(map.height == 32);
      CHECK(map.width == 32);
      for (double v : map.values) {
        CHECK(v >= 0);
        CHECK(v <= 1);
      }
    }
  }

  TEST_CASE("constant image gives a near-uniform map") {
    auto m = transfer_weights(trained_checkpoint(), tiny_spec(), false, 0);
    ImageTensor flat(32, 32, 3, ValueRange::standardized);
    for (auto& v : flat.data()) v = 0.3;
    const auto map = gradcam(m, flat, "block1", 0);
    auto vals = map.values;
    std::nth_element(vals.begin(), vals.begin() + static_cast<long>(vals.size() / 2), vals.end());
    const double median = vals[vals.size() / 2];
    std::size_t near = 0;
    for (double v : map.values) near += std::abs(v - median) < 0.1 ? 1 : 0;
    CHECK(static_cast<double>(near) / static_cast<double>(map.values.size()) >= 0.8);
  }

  TEST_CASE("trained and random models attend differently") {
    auto trained = transfer_weights(trained_checkpoint(), tiny_spec(), false, 0);
    auto random = transfer_weights(random_checkpoint(), tiny_spec(), false, 0);
    const auto& d = testutil::tiny_labeled();
    const auto imgs = standardize(ImageSet(d.images.begin(), d.images.begin() + 16)).images;
    auto top_mass = [](const Heatmap& h) {
      auto v = h.values;
      std::sort(v.rbegin(), v.rend());
      const double total = std::accumulate(v.begin(), v.end(), 0.0);
      if (total <= 0) return 0.0;
      return std::accumulate(v.begin(), v.begin() + static_cast<long>(v.size() / 10), 0.0) / total;
    };
    double mt = 0, mr = 0;
    for (const auto& img : imgs) {
      mt += top_mass(gradcam(trained, img, "block2", 0));
      mr += top_mass(gradcam(random, img, "block2", 0));
    }
    CHECK(std::abs(mt - mr) / 16 > 0.005);
  }

  TEST_CASE("unknown block or class") {
    auto m = transfer_weights(trained_checkpoint(), tiny_spec(), false, 0);
    ImageTensor img(32, 32, 3, ValueRange::standardized);
    CHECK_THROWS_AS(gradcam(m, img, "block7", 0), ArgumentError);
    CHECK_THROWS_AS(gradcam(m, img, "block1", 4), ArgumentError);
    CHECK_THROWS_AS(gradcam(m, img, "block1", -1), ArgumentError);
  }

  TEST_CASE("heatmap files") {
    Heatmap h;
    h.height = 4;
    h.width = 6;
    for (int i = 0; i < 24; ++i) h.values.push_back(i / 23.0);
    const auto dir = testutil::scratch_dir("heatmap");
    write_heatmap(h, dir / "cam.png", {{"block", "block1"}});
    const auto png = cv::imread((dir / "cam.png").string(), cv::IMREAD_UNCHANGED);
    REQUIRE_FALSE(png.empty());
    CHECK(png.rows == 4);
    CHECK(png.cols == 6);
    CHECK(png.channels() == 1);
    CHECK(png.at<unsigned char>(3, 5) == 255);
    CHECK(png.at<unsigned char>(0, 0) == 0);
    CHECK(std::filesystem::exists(dir / "cam.json"));
  }
}
