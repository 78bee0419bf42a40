#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "maskx/runner.hpp"

using namespace maskx;
namespace fs = std::filesystem;

namespace {

std::string temp_root() {
  const auto dir = fs::temp_directory_path() / "maskx_test_cli";
  fs::create_directories(dir);
  return dir.string();
}

std::string write_config(const std::string& name, const std::string& text) {
  const std::string path = (fs::path(temp_root()) / name).string();
  std::ofstream f(path);
  f << text;
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// small-everything config so CLI round trips stay fast
const char* kTinyBase = R"(
gen.canvas = 32
gen.images = 12
gen.seed = 5
gen.min_size = 0.25
gen.max_size = 0.5
gen.max_instances = 2
model.d = 24
model.e = 8
model.m = 7
model.s = 4
model.mlp_hidden = 16
train.steps = 4
train.decay_steps = 3
train.images_per_step = 2
train.seed = 2
split.a_size = 5
)";

}  // namespace

TEST_CASE("KvConfig parsing and validation") {
  const KvConfig cfg = KvConfig::from_text("a.x = 1\n# comment\n\nb.y=hello world\n");
  CHECK(cfg.integer("a.x", 0) == 1);
  CHECK(cfg.str("b.y", "") == "hello world");
  CHECK(cfg.integer("missing", 7) == 7);
  CHECK_THROWS_AS(KvConfig::from_text("no equals sign"), Error);
  CHECK_THROWS_AS(cfg.require("nope"), Error);
  CHECK_THROWS_AS(cfg.integer("b.y", 0), Error);

  SUBCASE("unknown keys are rejected with their names") {
    KvConfig c = KvConfig::from_text("gen.canvas = 64\nbogus.key = 1\n");
    CHECK_THROWS_WITH_AS(c.require_known(known_config_keys()), doctest::Contains("bogus.key"),
                         Error);
  }
  SUBCASE("flags accept on/off variants") {
    KvConfig c = KvConfig::from_text("train.stop_grad = off\ntrain.mlp_fusion = 1\n");
    CHECK(c.flag("train.stop_grad", true) == false);
    CHECK(c.flag("train.mlp_fusion", false) == true);
    KvConfig bad = KvConfig::from_text("train.stop_grad = maybe\n");
    CHECK_THROWS_AS(bad.flag("train.stop_grad", true), Error);
  }
  SUBCASE("lists split on commas") {
    KvConfig c = KvConfig::from_text("train.decay_steps = 600, 800\n");
    CHECK(c.int_list("train.decay_steps", {}) == std::vector<int>{600, 800});
  }
  SUBCASE("serialize is sorted and stable") {
    KvConfig c = KvConfig::from_text("b.k = 2\na.k = 1\n");
    CHECK(c.serialize() == "a.k = 1\nb.k = 2\n");
  }
  SUBCASE("subset hash ignores excluded keys") {
    KvConfig c1 = KvConfig::from_text("train.steps = 5\ntrain.resume = /x\n");
    KvConfig c2 = KvConfig::from_text("train.steps = 5\n");
    CHECK(c1.subset_hash({"train."}, {"train.resume"}) == c2.subset_hash({"train."}, {}));
  }
}

TEST_CASE("config builders map keys onto typed configs") {
  const KvConfig cfg = KvConfig::from_text(
      "train.head_mode = class-agnostic\ntrain.mode = stagewise\ntrain.source = box\n"
      "train.layers = 3\ntrain.activation = relu\ntrain.stop_grad = off\n"
      "model.e = 16\ngen.canvas = 64\n");
  const ModelConfig mc = model_config_from(cfg);
  CHECK(mc.head_mode == HeadMode::ClassAgnostic);
  CHECK(mc.dims.E == 16);
  CHECK(mc.transfer.source == EmbeddingSource::Box);
  CHECK(mc.transfer.layers == 3);
  CHECK(mc.transfer.relu_act);
  CHECK_FALSE(mc.transfer.stop_grad);
  const TrainConfig tc = train_config_from(cfg);
  CHECK(tc.mode == TrainConfig::Mode::Stagewise);
  const GenConfig gc = gen_config_from(cfg);
  CHECK(gc.canvas_h == 64);
  CHECK_THROWS_AS(model_config_from(KvConfig::from_text("train.head_mode = nosuch\n")), Error);
}

TEST_CASE("cli: bad invocations exit nonzero with no outputs") {
  CHECK(run({"eval", "--config", "/nonexistent/file.cfg", "--out", temp_root() + "/nope"}) != 0);
  CHECK_FALSE(fs::exists(temp_root() + "/nope/report.csv"));
  CHECK(run({"frobnicate", "--config", "x", "--out", "y"}) != 0);
  CHECK(run({}) != 0);

  const std::string cfg = write_config("bad_key.cfg", "gen.canvas = 32\nnot.a.key = 1\n");
  CHECK(run({"gen-data", "--config", cfg, "--out", temp_root() + "/badkey"}) != 0);
}

TEST_CASE("cli: gen-data twice is byte-identical; full pipeline runs") {
  const std::string root = temp_root();
  const std::string cfg = write_config("tiny.cfg", kTinyBase);

  const std::string d1 = root + "/data1";
  const std::string d2 = root + "/data2";
  fs::remove_all(d1);
  fs::remove_all(d2);
  REQUIRE(run({"gen-data", "--config", cfg, "--out", d1}) == 0);
  REQUIRE(run({"gen-data", "--config", cfg, "--out", d2}) == 0);
  CHECK(slurp(d1 + "/manifest") == slurp(d2 + "/manifest"));  // identical checksums
  CHECK(fs::exists(d1 + "/config.resolved"));
  CHECK(fs::exists(d1 + "/hashes.txt"));

  // train -> eval -> viz
  const std::string train_out = root + "/train1";
  fs::remove_all(train_out);
  REQUIRE(run({"train", "--config", cfg, "--set", "train.dataset=" + d1, "--out", train_out}) == 0);
  CHECK(fs::exists(train_out + "/checkpoint.maskx"));
  CHECK(fs::exists(train_out + "/loss_log.csv"));

  const std::string eval_out = root + "/eval1";
  fs::remove_all(eval_out);
  REQUIRE(run({"eval", "--config", cfg, "--set", "train.dataset=" + d1, "--set",
               "eval.dataset=" + d1, "--set", "eval.checkpoint=" + train_out + "/checkpoint.maskx",
               "--out", eval_out}) == 0);
  CHECK(fs::exists(eval_out + "/report.csv"));
  const std::string report = slurp(eval_out + "/report.csv");
  CHECK(report.rfind("label,split_hash,AP_A,AP_B,rel_change_B,trials,std_AP_B", 0) == 0);

  const std::string viz_out = root + "/viz1";
  fs::remove_all(viz_out);
  REQUIRE(run({"viz", "--config", cfg, "--set", "viz.dataset=" + d1, "--set", "viz.count=3",
               "--out", viz_out}) == 0);
  CHECK(fs::exists(viz_out + "/overlay_0.png"));
  CHECK(fs::exists(viz_out + "/overlay_2.png"));

  // checkpoint config-hash guard: different model dims must be rejected
  const std::string eval_bad = root + "/eval_bad";
  CHECK(run({"eval", "--config", cfg, "--set", "train.dataset=" + d1, "--set",
             "eval.dataset=" + d1, "--set", "eval.checkpoint=" + train_out + "/checkpoint.maskx",
             "--set", "model.e=16", "--out", eval_bad}) != 0);
}

TEST_CASE("cli: ablate grid arithmetic (2 head-modes x 1 split x 2 seeds)") {
  const std::string root = temp_root();
  const std::string cfg = write_config("ablate.cfg", std::string(kTinyBase) + R"(
ablate.head_modes = transfer,class-agnostic
ablate.seeds = 1,2
ablate.baseline = class-agnostic|e2e|mlp0
ablate.threads = 2
train.steps = 3
train.decay_steps = 2
)");
  const std::string data = root + "/ablate_data";
  fs::remove_all(data);
  REQUIRE(run({"gen-data", "--config", cfg, "--out", data}) == 0);

  const std::string out = root + "/ablate_out";
  fs::remove_all(out);
  REQUIRE(run({"ablate", "--config", cfg, "--set", "ablate.dataset=" + data, "--set",
               "ablate.eval_dataset=" + data, "--out", out}) == 0);

  const std::string csv = slurp(out + "/ablation.csv");
  // header + 2 aggregated rows (one per method label, 2 trials each)
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("transfer|cls+box|2-leaky_relu|e2e|sg1|mlp0") != std::string::npos);
  CHECK(csv.find("class-agnostic|e2e|mlp0") != std::string::npos);
  // per-cell artifacts: 4 runs
  int cells = 0;
  for (const auto& e : fs::directory_iterator(out + "/cells")) {
    CHECK(fs::exists(e.path() / "loss_log.csv"));
    ++cells;
  }
  CHECK(cells == 4);
}
