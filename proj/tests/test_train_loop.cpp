#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "maskx/train.hpp"

using namespace maskx;
namespace fs = std::filesystem;

namespace {

GenConfig tiny_gen() {
  GenConfig g;
  g.canvas_h = g.canvas_w = 32;
  g.min_size = 0.25;
  g.max_size = 0.5;
  g.max_instances = 2;
  return g;
}

ModelConfig tiny_model(HeadMode mode = HeadMode::Transfer) {
  ModelConfig mc;
  mc.num_classes = 10;
  mc.backbone.stages = {{8, 3, 2}, {16, 3, 2}};
  mc.dims = {24, 8, 7, 4, 16};
  mc.head_mode = mode;
  mc.init_seed = 2;
  return mc;
}

TrainConfig tiny_train(int steps = 10) {
  TrainConfig tc;
  tc.steps = steps;
  tc.decay_steps = {};
  tc.lr = 0.01f;
  tc.images_per_step = 2;
  tc.seed = 3;
  return tc;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = build_dataset(21, 24, tiny_gen());
  return ds;
}

}  // namespace

TEST_CASE("lr schedule is piecewise constant with the configured decays") {
  TrainConfig tc;
  tc.steps = 1000;
  tc.lr = 0.02f;
  tc.decay_steps = {600, 800};
  CHECK(lr_at(tc, 0) == doctest::Approx(0.02));
  CHECK(lr_at(tc, 599) == doctest::Approx(0.02));
  CHECK(lr_at(tc, 600) == doctest::Approx(0.002));
  CHECK(lr_at(tc, 700) == doctest::Approx(0.002));
  CHECK(lr_at(tc, 800) == doctest::Approx(0.0002));
  CHECK(lr_at(tc, 999) == doctest::Approx(0.0002));
  int drops = 0;
  for (int s = 1; s < tc.steps; ++s)
    if (lr_at(tc, s) != lr_at(tc, s - 1)) ++drops;
  CHECK(drops == 2);
  CHECK_THROWS_AS([&] {
    TrainConfig bad;
    bad.steps = 100;
    bad.decay_steps = {200};
    bad.validate();
  }(), Error);
}

TEST_CASE("sample_batch contract: GT+background mix, determinism") {
  const Dataset& ds = tiny_dataset();
  const TrainConfig tc = tiny_train();
  const StepBatch a = sample_batch(ds, tc, 4);
  const StepBatch b = sample_batch(ds, tc, 4);
  CHECK(a.image_ids == b.image_ids);
  REQUIRE(a.rois.size() == b.rois.size());
  for (size_t i = 0; i < a.rois.size(); ++i) {
    CHECK(a.rois[i].label == b.rois[i].label);
    CHECK(a.rois[i].roi.x0 == b.rois[i].roi.x0);
  }
  // backgrounds keep IoU < 0.3 against every GT box
  for (const RoiSample& r : a.rois) {
    if (r.label != 0) continue;
    const SceneRecord& rec = ds.records[static_cast<size_t>(a.image_ids[static_cast<size_t>(r.image_slot)])];
    for (const Instance& inst : rec.instances) CHECK(box_iou(r.roi, inst.box) < 0.3);
  }
  const StepBatch c = sample_batch(ds, tc, 5);
  CHECK((c.image_ids != a.image_ids || c.rois.size() != a.rois.size() ||
         c.rois[0].roi.x0 != a.rois[0].roi.x0));
}

TEST_CASE("compute_losses: A/B masking rules") {
  const Dataset& ds = tiny_dataset();
  Model model = build_model(tiny_model());
  const SplitConfig split = split_classes(10, 5, false, 0);
  const TrainConfig tc = tiny_train();

  // find a step whose batch contains both A and B foregrounds
  int step_mixed = -1;
  for (int s = 0; s < 200 && step_mixed < 0; ++s) {
    const StepBatch b = sample_batch(ds, tc, s);
    bool has_a = false, has_b = false;
    for (const RoiSample& r : b.rois) {
      if (r.label == 0) continue;
      (split.in_a(r.label - 1) ? has_a : has_b) = true;
    }
    if (has_a && has_b) step_mixed = s;
  }
  REQUIRE(step_mixed >= 0);

  SUBCASE("a batch with only B-class instances flags the mask loss empty") {
    int step_b_only = -1;
    for (int s = 0; s < 500 && step_b_only < 0; ++s) {
      const StepBatch b = sample_batch(ds, tc, s);
      bool any_fg = false, any_a = false;
      for (const RoiSample& r : b.rois) {
        if (r.label == 0) continue;
        any_fg = true;
        if (split.in_a(r.label - 1)) any_a = true;
      }
      if (any_fg && !any_a) step_b_only = s;
    }
    REQUIRE(step_b_only >= 0);
    Tape t;
    TapeModel tm(t, model);
    const LossBundle lb =
        compute_losses(tm, ds, sample_batch(ds, tc, step_b_only), split, LossEnable{});
    CHECK(lb.mask.empty());
    CHECK(t.value(lb.mask.id).v[0] == 0.0f);
    CHECK_FALSE(lb.cls.empty());
  }

  SUBCASE("losses are finite and positive on a mixed batch") {
    Tape t;
    TapeModel tm(t, model);
    const LossBundle lb =
        compute_losses(tm, ds, sample_batch(ds, tc, step_mixed), split, LossEnable{});
    CHECK(t.value(lb.cls.id).v[0] > 0);
    CHECK(t.value(lb.box.id).v[0] >= 0);
    CHECK_FALSE(lb.mask.empty());
    CHECK(t.value(lb.total).v[0] ==
          t.value(lb.cls.id).v[0] + t.value(lb.box.id).v[0] + t.value(lb.mask.id).v[0]);
  }

  SUBCASE("oracle head mode takes mask loss on all foreground classes") {
    Model oracle = build_model(tiny_model(HeadMode::Oracle));
    int step_b_only = -1;
    for (int s = 0; s < 500 && step_b_only < 0; ++s) {
      const StepBatch b = sample_batch(ds, tc, s);
      bool any_fg = false, any_a = false;
      for (const RoiSample& r : b.rois) {
        if (r.label == 0) continue;
        any_fg = true;
        if (split.in_a(r.label - 1)) any_a = true;
      }
      if (any_fg && !any_a) step_b_only = s;
    }
    REQUIRE(step_b_only >= 0);
    Tape t;
    TapeModel tm(t, oracle);
    const LossBundle lb =
        compute_losses(tm, ds, sample_batch(ds, tc, step_b_only), split, LossEnable{});
    CHECK_FALSE(lb.mask.empty());  // B-class masks supervise the oracle
  }
}

TEST_CASE("stop-gradient training contract (criterion 2 shape)") {
  const Dataset& ds = tiny_dataset();
  const SplitConfig split = split_classes(10, 5, false, 0);
  TrainConfig tc = tiny_train();

  // a step with at least one A-class foreground
  int step_a = -1;
  for (int s = 0; s < 200 && step_a < 0; ++s) {
    const StepBatch b = sample_batch(ds, tc, s);
    for (const RoiSample& r : b.rois)
      if (r.label > 0 && split.in_a(r.label - 1)) step_a = s;
  }
  REQUIRE(step_a >= 0);

  const LossEnable mask_only{false, false, true, false};

  SUBCASE("stop-grad on: W_cls/W_box bitwise unchanged by a mask-only step") {
    ModelConfig mc = tiny_model();
    mc.transfer.stop_grad = true;
    Model model = build_model(mc);
    const Tensor cls_before = model.params.get("box.cls.w").value;
    const Tensor box_before = model.params.get("box.box.w").value;
    run_train_step(model, ds, split, tc, step_a, 0.01f, mask_only,
                   [](const std::string&) { return true; });
    CHECK(model.params.get("box.cls.w").value.v == cls_before.v);
    CHECK(model.params.get("box.box.w").value.v == box_before.v);
    // but the mask head and transfer parameters did move
    CHECK(model.params.get("transfer.l0.w").value.v !=
          build_model(mc).params.get("transfer.l0.w").value.v);
  }

  SUBCASE("stop-grad off: some A-class rows of W_cls change") {
    ModelConfig mc = tiny_model();
    mc.transfer.stop_grad = false;
    Model model = build_model(mc);
    const Tensor cls_before = model.params.get("box.cls.w").value;
    run_train_step(model, ds, split, tc, step_a, 0.01f, mask_only,
                   [](const std::string&) { return true; });
    const Tensor& cls_after = model.params.get("box.cls.w").value;
    bool changed = false;
    for (int c : split.a)
      for (int j = 0; j <= mc.dims.D; ++j)
        if (cls_after.at2(c + 1, j) != cls_before.at2(c + 1, j)) changed = true;
    CHECK(changed);
  }
}

TEST_CASE("stagewise: stage 2 leaves stage-1 weights bitwise frozen") {
  const Dataset& ds = tiny_dataset();
  const SplitConfig split = split_classes(10, 5, false, 0);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(6);
  tc.mode = TrainConfig::Mode::Stagewise;

  const TrainOutput out = train_model(ds, split, mc, tc);
  CHECK(out.final_step == 12);
  CHECK(out.log.size() == 12);

  // replicate stage 1 alone and compare the detection weights bitwise
  TrainConfig stage1 = tc;
  stage1.mode = TrainConfig::Mode::E2e;  // same loop shape, cls+box only below
  Model ref = build_model(mc);
  for (int s = 0; s < 6; ++s) {
    run_train_step(ref, ds, split, stage1, s, lr_at(stage1, s), {true, true, false, false},
                   [](const std::string& n) {
                     return n.rfind("bb.", 0) == 0 || n.rfind("box.", 0) == 0;
                   });
  }
  CHECK(out.model.params.get("box.cls.w").value.v == ref.params.get("box.cls.w").value.v);
  CHECK(out.model.params.get("box.box.w").value.v == ref.params.get("box.box.w").value.v);
  CHECK(out.model.params.get("bb.conv0.w").value.v == ref.params.get("bb.conv0.w").value.v);
  // stage-2 rows log mask loss only
  CHECK(out.log[6].cls == 0.0f);
  CHECK(out.log[6].box == 0.0f);
}

TEST_CASE("fixed seed reproduces the loss curve bitwise") {
  const Dataset& ds = tiny_dataset();
  const SplitConfig split = split_classes(10, 5, false, 0);
  auto run = [&] {
    std::vector<float> curve;
    const TrainOutput out = train_model(ds, split, tiny_model(), tiny_train(8));
    for (const LossRow& r : out.log) {
      curve.push_back(r.cls);
      curve.push_back(r.box);
      curve.push_back(r.mask);
    }
    return curve;
  };
  CHECK(run() == run());
}

TEST_CASE("overfit sanity: loss drops on a tiny fixed set") {
  GenConfig g = tiny_gen();
  const Dataset ds = build_dataset(50, 50, g);
  const SplitConfig split = split_classes(10, 5, false, 0);
  ModelConfig mc = tiny_model(HeadMode::Oracle);
  TrainConfig tc = tiny_train(200);
  tc.lr = 0.02f;
  tc.decay_steps = {};
  const TrainOutput out = train_model(ds, split, mc, tc);
  auto total_at = [&](int step) {
    const LossRow& r = out.log[static_cast<size_t>(step)];
    return r.cls + r.box + r.mask;
  };
  // average a small window to damp batch noise
  double early = 0, late = 0;
  for (int s = 8; s < 13; ++s) early += total_at(s);
  for (int s = 195; s < 200; ++s) late += total_at(s);
  CHECK(late < early);
  CHECK(total_at(199) < total_at(10));
}

TEST_CASE("checkpoint round trip and resume replay") {
  const Dataset& ds = tiny_dataset();
  const SplitConfig split = split_classes(10, 5, false, 0);
  const ModelConfig mc = tiny_model();
  const auto dir = fs::temp_directory_path() / "maskx_test_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "model.maskx").string();

  SUBCASE("save then load is bitwise equal") {
    const TrainOutput out = train_model(ds, split, mc, tiny_train(4));
    save_checkpoint(path, out.model, 4, 0xabcdef);
    const CheckpointData data = load_checkpoint(path);
    CHECK(data.step == 4);
    CHECK(data.config_hash == 0xabcdef);
    Model loaded = build_model(mc);
    apply_checkpoint(loaded, data);
    for (int i = 0; i < loaded.params.size(); ++i) {
      CHECK(loaded.params.at(i).value.v == out.model.params.at(i).value.v);
      CHECK(loaded.params.at(i).vel.v == out.model.params.at(i).vel.v);
    }
  }

  SUBCASE("resumed training replays the uninterrupted run exactly") {
    const TrainConfig tc = tiny_train(8);
    const TrainOutput full = train_model(ds, split, mc, tc);

    const TrainConfig half = tiny_train(4);
    const TrainOutput first = train_model(ds, split, mc, half);
    save_checkpoint(path, first.model, 4, 1);
    const CheckpointData data = load_checkpoint(path);
    Model resumed = build_model(mc);
    apply_checkpoint(resumed, data);
    const TrainOutput second =
        train_model(ds, split, mc, tc, &resumed, static_cast<int>(data.step));

    REQUIRE(second.log.size() == 4);
    for (size_t i = 0; i < second.log.size(); ++i) {
      const LossRow& a = full.log[4 + i];
      const LossRow& b = second.log[i];
      CHECK(a.step == b.step);
      CHECK(a.cls == b.cls);  // bitwise float equality
      CHECK(a.box == b.box);
      CHECK(a.mask == b.mask);
    }
    for (int i = 0; i < full.model.params.size(); ++i)
      CHECK(full.model.params.at(i).value.v == second.model.params.at(i).value.v);
  }

  SUBCASE("truncated checkpoint loads nothing") {
    const TrainOutput out = train_model(ds, split, mc, tiny_train(2));
    save_checkpoint(path, out.model, 2, 1);
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 17);
    CHECK_THROWS_AS(load_checkpoint(path), Error);
  }

  SUBCASE("checkpoint rejects a model with different parameters") {
    const TrainOutput out = train_model(ds, split, mc, tiny_train(2));
    save_checkpoint(path, out.model, 2, 1);
    const CheckpointData data = load_checkpoint(path);
    Model other = build_model(tiny_model(HeadMode::Oracle));
    CHECK_THROWS_AS(apply_checkpoint(other, data), Error);
  }
}

TEST_CASE("loss log format") {
  const auto dir = fs::temp_directory_path() / "maskx_test_log";
  fs::create_directories(dir);
  const std::string path = (dir / "loss.csv").string();
  write_loss_log(path, {{0, 0.02f, 1.5f, 0.25f, 0.75f}, {1, 0.002f, 1.0f, 0.2f, 0.5f}});
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "step,lr,cls_loss,box_loss,mask_loss");
  std::getline(f, line);
  CHECK(line == "0,0.02,1.500000,0.250000,0.750000");
}

TEST_CASE("full-K experimental flag changes the supervised set but honors A/B") {
  const Dataset& ds = tiny_dataset();
  const SplitConfig split = split_classes(10, 5, false, 0);
  Model model = build_model(tiny_model(HeadMode::Transfer));
  const TrainConfig tc = tiny_train();
  int step_a = -1;
  for (int s = 0; s < 200 && step_a < 0; ++s) {
    const StepBatch b = sample_batch(ds, tc, s);
    for (const RoiSample& r : b.rois)
      if (r.label > 0 && split.in_a(r.label - 1)) step_a = s;
  }
  REQUIRE(step_a >= 0);
  const StepBatch batch = sample_batch(ds, tc, step_a);
  Tape t1;
  TapeModel tm1(t1, model);
  const LossBundle per_channel = compute_losses(tm1, ds, batch, split, {true, true, true, false});
  Tape t2;
  TapeModel tm2(t2, model);
  const LossBundle full_k = compute_losses(tm2, ds, batch, split, {true, true, true, true});
  CHECK(full_k.mask.count == per_channel.mask.count * 10);  // K channels supervised
}
