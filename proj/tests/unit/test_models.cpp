#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "scalenet/checkpoint.hpp"
#include "scalenet/models.hpp"
#include "scalenet/util.hpp"

#include <json.hpp>

using namespace scalenet;

namespace {

BackboneSpec small_spec(int head_out = 4, int width = 8) {
  BackboneSpec s;
  s.arch = Arch::small_convnet;
  s.head_out = head_out;
  s.width = width;
  return s;
}

CheckpointMeta meta_for(const BackboneSpec& s) {
  CheckpointMeta m;
  m.arch = s.arch;
  m.width = s.effective_width();
  m.head_out = s.head_out;
  return m;
}

std::map<std::string, torch::Tensor> snapshot(const std::vector<std::pair<std::string, torch::Tensor>>& state) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& [n, t] : state) out[n] = t.detach().clone();
  return out;
}

bool equal_state(const std::map<std::string, torch::Tensor>& a,
                 const std::vector<std::pair<std::string, torch::Tensor>>& b, const std::string& prefix = "") {
  for (const auto& [n, t] : b) {
    if (!prefix.empty() && n.rfind(prefix, 0) != 0) continue;
    if (!torch::equal(a.at(n), t)) return false;
  }
  return true;
}

void sgd_steps(Backbone& model, int steps, std::uint64_t seed) {
  torch::manual_seed(seed);
  torch::optim::SGD opt(model->trainable_parameters(), torch::optim::SGDOptions(0.1).momentum(0.9));
  model->train();
  for (int i = 0; i < steps; ++i) {
    const auto x = torch::randn({8, 3, 32, 32});
    const auto y = torch::randint(0, model->spec().head_out, {8});
    opt.zero_grad();
    torch::nn::functional::cross_entropy(model->forward(x), y).backward();
    opt.step();
  }
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("equal seeds build identical weights") {
    auto a = build_backbone(small_spec(), 5);
    auto b = build_backbone(small_spec(), 5);
    auto c = build_backbone(small_spec(), 6);
    CHECK(extract_checkpoint(a, meta_for(small_spec())) == extract_checkpoint(b, meta_for(small_spec())));
    CHECK_FALSE(extract_checkpoint(a, meta_for(small_spec())) == extract_checkpoint(c, meta_for(small_spec())));
  }

  TEST_CASE("logit shapes for every architecture") {
    for (Arch arch : {Arch::small_convnet, Arch::alexnet_style, Arch::resnet50_style}) {
      BackboneSpec s;
      s.arch = arch;
      s.head_out = 4;
      s.width = arch == Arch::resnet50_style ? 8 : 0;
      auto m = build_backbone(s, 1);
      m->eval();
      const auto out = m->forward(torch::randn({2, 3, 32, 32}));
      CHECK(out.sizes() == torch::IntArrayRef({2, 4}));
      CHECK(torch::isfinite(out).all().item<bool>());
      CHECK(m->block_names() == default_block_names(arch));
    }
    CHECK(default_block_names(Arch::alexnet_style).size() == 5);
  }

  TEST_CASE("small_convnet default parameter count") {
    BackboneSpec s = small_spec(4, 0);
    auto m = build_backbone(s, 1);
    std::int64_t n = 0;
    for (const auto& p : m->parameters()) n += p.numel();
    CHECK(n > 300000);
    CHECK(n < 800000);
  }

  TEST_CASE("half-scale input and empty batch") {
    auto m = build_backbone(small_spec(), 1);
    m->eval();
    CHECK(m->forward(torch::randn({3, 3, 16, 16})).sizes() == torch::IntArrayRef({3, 4}));
    CHECK(m->forward(torch::zeros({0, 3, 32, 32})).size(0) == 0);
  }

  TEST_CASE("trunk output does not depend on head size") {
    auto a = build_backbone(small_spec(4), 9);
    auto b = transfer_weights(extract_checkpoint(a, meta_for(small_spec(4))), small_spec(10), true, 1);
    a->eval();
    b->eval();
    const auto x = torch::randn({2, 3, 32, 32});
    CHECK(torch::equal(a->features(x), b->features(x)));
    CHECK(b->forward(x).size(1) == 10);
  }

  TEST_CASE("construction errors") {
    auto s = small_spec();
    s.input_h = 4;
    CHECK_THROWS_AS(build_backbone(s, 0), ConstructionError);
    s = small_spec(1);
    CHECK_THROWS_AS(build_backbone(s, 0), ArgumentError);
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("zero logits give uniform rows") {
    const auto p = softmax_rows(torch::zeros({3, 4}));
    CHECK(torch::allclose(p, torch::full({3, 4}, 0.25, torch::kFloat64)));
  }

  TEST_CASE("rows sum to one and are shift invariant") {
    const auto z = torch::randn({16, 4}, torch::kFloat64) * 30;
    const auto p = softmax_rows(z);
    CHECK(torch::allclose(p.sum(1), torch::ones({16}, torch::kFloat64), 0, 1e-12));
    CHECK((p >= 0).all().item<bool>());
    CHECK(torch::allclose(softmax_rows(z + 1234.5), p, 0, 1e-12));
  }

  TEST_CASE("non-finite row is reported by index") {
    auto z = torch::zeros({4, 4});
    z[2][1] = std::numeric_limits<float>::quiet_NaN();
    try {
      softmax_rows(z);
      FAIL("expected NonFiniteLogitsError");
    } catch (const NonFiniteLogitsError& e) {
      CHECK(e.batch_index() == 2);
    }
  }

  TEST_CASE("predict_distribution on a model") {
    auto m = build_backbone(small_spec(), 3);
    const auto p = predict_distribution(m, torch::randn({5, 3, 32, 32}));
    CHECK(p.sizes() == torch::IntArrayRef({5, 4}));
    CHECK(torch::allclose(p.sum(1), torch::ones({5}, torch::kFloat64), 0, 1e-9));
  }
}

TEST_SUITE("transfer") {
  TEST_CASE("conv trunk copied bitwise, head copied when shapes match") {
    auto a = build_backbone(small_spec(), 11);
    const auto ck = extract_checkpoint(a, meta_for(small_spec()));
    auto b = transfer_weights(ck, small_spec(), false, 99);
    CHECK(extract_checkpoint(b, meta_for(small_spec())) == ck);
  }

  TEST_CASE("4-way head onto 10 classes needs reinit") {
    auto a = build_backbone(small_spec(4), 11);
    const auto ck = extract_checkpoint(a, meta_for(small_spec(4)));
    CHECK_THROWS_AS(transfer_weights(ck, small_spec(10), false, 0), ShapeError);
    auto b = transfer_weights(ck, small_spec(10), true, 5);
    auto c = transfer_weights(ck, small_spec(10), true, 5);
    const auto cb = extract_checkpoint(b, meta_for(small_spec(10)));
    CHECK(cb == extract_checkpoint(c, meta_for(small_spec(10))));
    CHECK(cb.conv_weights == ck.conv_weights);
    const auto& w = cb.head_weights.at("head.weight");
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.shape[1]));
    for (float v : w.values) CHECK(std::abs(v) <= bound);
  }

  TEST_CASE("architecture and width mismatches") {
    auto a = build_backbone(small_spec(), 1);
    const auto ck = extract_checkpoint(a, meta_for(small_spec()));
    BackboneSpec alex;
    alex.arch = Arch::alexnet_style;
    CHECK_THROWS_AS(transfer_weights(ck, alex, true, 0), TransferError);
    CHECK_THROWS_AS(transfer_weights(ck, small_spec(4, 16), true, 0), TransferError);
  }

  TEST_CASE("missing or extra layers") {
    auto a = build_backbone(small_spec(), 1);
    auto ck = extract_checkpoint(a, meta_for(small_spec()));
    auto missing = ck;
    missing.conv_weights.erase(missing.conv_weights.begin());
    CHECK_THROWS_AS(transfer_weights(missing, small_spec(), true, 0), IntegrityError);
    auto extra = ck;
    extra.conv_weights["bogus.weight"] = WeightArray{{1}, {0.f}};
    CHECK_THROWS_AS(transfer_weights(extra, small_spec(), true, 0), IntegrityError);
  }
}

TEST_SUITE("freeze") {
  TEST_CASE("ALL freezes the trunk through 10 steps") {
    auto m = build_backbone(small_spec(), 2);
    const auto before = snapshot(m->trunk_state());
    const auto head_before = snapshot(m->head_state());
    freeze_conv(m, kAllBlocks);
    sgd_steps(m, 10, 1);
    CHECK(equal_state(before, m->trunk_state()));
    CHECK_FALSE(equal_state(head_before, m->head_state()));
  }

  TEST_CASE("prefix freeze keeps later blocks trainable") {
    auto m = build_backbone(small_spec(), 2);
    const auto before = snapshot(m->trunk_state());
    freeze_conv(m, "block2");
    sgd_steps(m, 10, 1);
    CHECK(equal_state(before, m->trunk_state(), "block1."));
    CHECK(equal_state(before, m->trunk_state(), "block2."));
    CHECK_FALSE(equal_state(before, m->trunk_state(), "block3."));
    unfreeze_all(m);
    CHECK(m->frozen_blocks() == 0);
  }

  TEST_CASE("no freeze updates every block") {
    auto m = build_backbone(small_spec(), 2);
    const auto before = snapshot(m->trunk_state());
    sgd_steps(m, 2, 1);
    for (const auto& b : m->block_names()) CHECK_FALSE(equal_state(before, m->trunk_state(), b + "."));
  }

  TEST_CASE("unknown block") {
    auto m = build_backbone(small_spec(), 2);
    CHECK_THROWS_AS(freeze_conv(m, "conv9"), ArgumentError);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("encode/decode and disk round trips are bit-exact") {
    auto m = build_backbone(small_spec(), 4);
    auto meta = meta_for(small_spec());
    meta.alpha = 0.5;
    meta.epochs_trained = 3;
    meta.seed = 17;
    meta.schedule_digest = "abc";
    const auto ck = extract_checkpoint(m, meta);
    CHECK(decode_checkpoint(encode_checkpoint(ck)) == ck);
    const auto dir = testutil::scratch_dir("ckpt");
    save_checkpoint(ck, dir / "m.ckpt");
    CHECK(load_checkpoint(dir / "m.ckpt") == ck);
    CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
  }

  TEST_CASE("manifest lists every layer with dtype and offset") {
    auto m = build_backbone(small_spec(), 4);
    const auto ck = extract_checkpoint(m, meta_for(small_spec()));
    const auto ar = encode_checkpoint(ck);
    const auto j = nlohmann::json::parse(ar.manifest);
    std::size_t bytes = 0;
    for (const auto& l : j.at("layers")) {
      CHECK(l.at("dtype") == "float32_le");
      CHECK(l.at("offset").get<std::size_t>() == bytes);
      std::size_t n = 1;
      for (auto d : l.at("shape")) n *= d.get<std::size_t>();
      bytes += 4 * n;
    }
    CHECK(bytes == ar.weights.size());
    CHECK(j.at("layers").size() == ck.conv_weights.size() + ck.head_weights.size());
  }

  TEST_CASE("truncated archive is rejected") {
    auto m = build_backbone(small_spec(), 4);
    const auto dir = testutil::scratch_dir("ckpt_trunc");
    save_checkpoint(extract_checkpoint(m, meta_for(small_spec())), dir / "m.ckpt");
    const auto bytes = read_file(dir / "m.ckpt");
    write_file_atomic(dir / "t.ckpt", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), IntegrityError);
  }

  TEST_CASE("alpha outside (0, 1]") {
    ModelCheckpoint ck;
    ck.meta.alpha = 0.0;
    CHECK_THROWS_AS(ck.validate(), ArgumentError);
    ck.meta.alpha = 1.2;
    CHECK_THROWS_AS(ck.validate(), ArgumentError);
  }
}
