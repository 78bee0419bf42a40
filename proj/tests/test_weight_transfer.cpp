#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "maskx/heads.hpp"

using namespace maskx;
namespace fs = std::filesystem;

namespace {

ModelConfig transfer_config(EmbeddingSource source = EmbeddingSource::ClsBox) {
  ModelConfig mc;
  mc.num_classes = 10;
  mc.dims = {32, 8, 7, 4, 16};
  mc.head_mode = HeadMode::Transfer;
  mc.transfer.source = source;
  mc.init_seed = 11;
  return mc;
}

}  // namespace

TEST_CASE("embedding widths per source") {
  const int D = 32;
  CHECK(embedding_width(EmbeddingSource::Cls, D) == D + 1);
  CHECK(embedding_width(EmbeddingSource::Box, D) == 4 * (D + 1));
  CHECK(embedding_width(EmbeddingSource::ClsBox, D) == 5 * (D + 1));
  // paper-scale check: cls rows are 1024(+bias)-d per class
  CHECK(embedding_width(EmbeddingSource::Cls, 1024) == 1025);
  CHECK(embedding_width(EmbeddingSource::ClsBox, 1024) ==
        embedding_width(EmbeddingSource::Cls, 1024) + embedding_width(EmbeddingSource::Box, 1024));
}

TEST_CASE("build_class_embedding pulls the right detection rows") {
  Model model = build_model(transfer_config());
  const int D = model.cfg.dims.D;
  Tape t;
  TapeModel tm(t, model);
  const auto emb = t.value(build_class_embedding(tm, model.cfg.transfer));
  CHECK(emb.shape == std::vector<int>{10, 5 * (D + 1)});

  const Tensor& wcls = model.params.get("box.cls.w").value;
  const Tensor& wbox = model.params.get("box.box.w").value;
  for (int c = 0; c < 10; ++c) {
    for (int j = 0; j <= D; ++j)
      CHECK(emb.at2(c, j) == wcls.at2(c + 1, j));  // background row 0 excluded
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j <= D; ++j)
        CHECK(emb.at2(c, (D + 1) * (1 + r) + j) == wbox.at2(4 * c + r, j));
  }
}

TEST_CASE("randn embedding is deterministic per (class, seed)") {
  const Tensor a = randn_embedding(10, 16, 42);
  const Tensor b = randn_embedding(10, 16, 42);
  CHECK(a.v == b.v);
  const Tensor c = randn_embedding(10, 16, 43);
  CHECK(a.v != c.v);
  // row c depends only on (seed, c): a wider matrix shares the row prefix
  const Tensor wide = randn_embedding(10, 24, 42);
  for (int r = 0; r < 10; ++r)
    for (int j = 0; j < 16; ++j) CHECK(wide.at2(r, j) == a.at2(r, j));
}

TEST_CASE("external embedding file round trip and validation") {
  const auto dir = fs::temp_directory_path() / "maskx_test_emb";
  fs::create_directories(dir);
  const std::string path = (dir / "emb.txt").string();
  Tensor rows({10, 6});
  Rng rng(1);
  for (auto& v : rows.v) v = static_cast<float>(rng.normal());
  save_external_embedding(path, rows);
  const Tensor back = load_external_embedding(path, 10);
  CHECK(back.shape == rows.shape);
  for (int64_t i = 0; i < rows.numel(); ++i)
    CHECK(back.v[static_cast<size_t>(i)] ==
          doctest::Approx(rows.v[static_cast<size_t>(i)]).epsilon(1e-6));
  CHECK_THROWS_AS(load_external_embedding(path, 8), Error);  // class-count mismatch
}

TEST_CASE("transfer_forward") {
  SUBCASE("theta all zero maps every class to zero w_seg") {
    Model model = build_model(transfer_config());
    for (int l = 0; l < 2; ++l)
      for (auto& v : model.params.get("transfer.l" + std::to_string(l) + ".w").value.v) v = 0.0f;
    Tape t;
    TapeModel tm(t, model);
    const auto out =
        t.value(transfer_forward(tm, build_class_embedding(tm, model.cfg.transfer), model.cfg.transfer));
    CHECK(out.shape == std::vector<int>{10, model.cfg.dims.E + 1});
    for (float v : out.v) CHECK(v == 0.0f);
  }

  SUBCASE("identical embedding rows give identical w_seg rows; per-class independence") {
    Model model = build_model(transfer_config());
    Tape t;
    TapeModel tm(t, model);
    const int din = 5 * (model.cfg.dims.D + 1);
    Tensor emb({4, din});
    Rng rng(2);
    for (int j = 0; j < din; ++j) {
      const float v = static_cast<float>(rng.normal());
      emb.at2(0, j) = v;
      emb.at2(2, j) = v;  // rows 0 and 2 identical
      emb.at2(1, j) = static_cast<float>(rng.normal());
      emb.at2(3, j) = static_cast<float>(rng.normal());
    }
    // reuse model theta but feed a hand-made embedding
    const auto out = t.value(transfer_forward(tm, t.leaf(emb), model.cfg.transfer));
    for (int j = 0; j <= model.cfg.dims.E; ++j) CHECK(out.at2(0, j) == out.at2(2, j));

    // permuting rows permutes outputs identically
    Tensor perm({4, din});
    const int order[4] = {3, 0, 2, 1};
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j < din; ++j) perm.at2(r, j) = emb.at2(order[r], j);
    Tape t2;
    TapeModel tm2(t2, model);
    const auto out2 = t2.value(transfer_forward(tm2, t2.leaf(perm), model.cfg.transfer));
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j <= model.cfg.dims.E; ++j) CHECK(out2.at2(r, j) == out.at2(order[r], j));
  }

  SUBCASE("2-layer leaky composition matches a hand-unrolled oracle") {
    Tensor emb = Tensor::from({2, 2}, {1.0f, 2.0f, -1.0f, 0.5f});
    const std::string path =
        (fs::temp_directory_path() / "maskx_test_hand_emb.txt").string();
    save_external_embedding(path, emb);

    ModelConfig mc = transfer_config(EmbeddingSource::External);
    mc.num_classes = 2;
    mc.dims.E = 1;  // output width 2
    mc.transfer.hidden = 2;
    mc.transfer.external_path = path;
    Model model = build_model(mc);
    // hand-chosen 2x3 matrices (bias column last)
    Tensor& l0 = model.params.get("transfer.l0.w").value;
    Tensor& l1 = model.params.get("transfer.l1.w").value;
    REQUIRE(l0.shape == std::vector<int>{2, 3});
    REQUIRE(l1.shape == std::vector<int>{2, 3});
    l0 = Tensor::from({2, 3}, {1.0f, -2.0f, 0.5f, 0.0f, 1.0f, -1.0f});
    l1 = Tensor::from({2, 3}, {2.0f, 1.0f, 0.0f, -1.0f, 0.5f, 0.25f});

    Tape t;
    TapeModel tm(t, model);
    TransferSpec spec = mc.transfer;  // 2-layer leaky 0.01, din=2 via direct leaf
    const auto out = t.value(transfer_forward(tm, t.leaf(emb), spec));

    auto leaky = [](double x) { return x > 0 ? x : 0.01 * x; };
    for (int c = 0; c < 2; ++c) {
      const double e0 = emb.at2(c, 0), e1 = emb.at2(c, 1);
      const double h0 = leaky(1.0 * e0 - 2.0 * e1 + 0.5);
      const double h1 = leaky(0.0 * e0 + 1.0 * e1 - 1.0);
      const double o0 = 2.0 * h0 + 1.0 * h1 + 0.0;
      const double o1 = -1.0 * h0 + 0.5 * h1 + 0.25;
      CHECK(out.at2(c, 0) == doctest::Approx(o0));
      CHECK(out.at2(c, 1) == doctest::Approx(o1));
    }
  }

  SUBCASE("1-layer spec is exactly an affine map") {
    ModelConfig mc = transfer_config();
    mc.transfer.layers = 1;
    Model model = build_model(mc);
    const Tensor& w = model.params.get("transfer.l0.w").value;
    const int din = 5 * (mc.dims.D + 1);
    Tensor emb({3, din});
    Rng rng(4);
    for (auto& v : emb.v) v = static_cast<float>(rng.normal() * 0.2);
    Tape t;
    TapeModel tm(t, model);
    const auto out = t.value(transfer_forward(tm, t.leaf(emb), mc.transfer));
    for (int c = 0; c < 3; ++c) {
      for (int o = 0; o <= mc.dims.E; ++o) {
        double acc = w.at2(o, din);
        for (int j = 0; j < din; ++j)
          acc += static_cast<double>(w.at2(o, j)) * emb.at2(c, j);
        CHECK(out.at2(c, o) == doctest::Approx(acc).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("stop-grad blocks the transfer path into detection weights") {
  for (const bool stop : {true, false}) {
    ModelConfig mc = transfer_config();
    mc.transfer.stop_grad = stop;
    Model model = build_model(mc);
    Tape t;
    TapeModel tm(t, model, [](const std::string&) { return true; });
    const auto wseg = transfer_forward(tm, build_class_embedding(tm, mc.transfer), mc.transfer);
    const auto loss = t.sum(t.mul(wseg, wseg));
    t.backward(loss);
    const auto cls_leaf = tm.param("box.cls.w");
    const auto box_leaf = tm.param("box.box.w");
    if (stop) {
      CHECK_FALSE(t.has_grad(cls_leaf));
      CHECK_FALSE(t.has_grad(box_leaf));
    } else {
      REQUIRE(t.has_grad(cls_leaf));
      REQUIRE(t.has_grad(box_leaf));
      double mag = 0;
      for (float v : t.grad(cls_leaf).v) mag += std::abs(v);
      CHECK(mag > 0);
      // background row receives nothing through the embedding
      const Tensor& g = t.grad(cls_leaf);
      for (int j = 0; j <= mc.dims.D; ++j) CHECK(g.at2(0, j) == 0.0f);
    }
  }
}
