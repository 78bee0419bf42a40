#include "maskx/runner.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "maskx/viz.hpp"

namespace fs = std::filesystem;

namespace maskx {

namespace {

std::string hex16(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write " + path);
  f << text;
  check(f.good(), "write failed: " + path);
}

void write_run_metadata(const std::string& out_dir, const KvConfig& cfg,
                        const std::vector<std::pair<std::string, uint64_t>>& hashes) {
  write_text((fs::path(out_dir) / "config.resolved").string(), cfg.serialize());
  std::string h;
  for (const auto& [name, v] : hashes) h += name + " " + hex16(v) + "\n";
  write_text((fs::path(out_dir) / "hashes.txt").string(), h);
}

}  // namespace

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "gen.canvas", "gen.images", "gen.seed", "gen.min_instances", "gen.max_instances",
      "gen.min_size", "gen.max_size", "gen.max_overlap", "gen.noise",
      "split.mode", "split.a_size", "split.seed",
      "model.d", "model.e", "model.m", "model.s", "model.mlp_hidden",
      "train.dataset", "train.mode", "train.head_mode", "train.mlp_fusion", "train.source",
      "train.external_path", "train.layers", "train.activation", "train.hidden",
      "train.leaky_slope", "train.stop_grad", "train.randn_seed", "train.steps", "train.lr",
      "train.decay_steps", "train.decay_factor", "train.momentum", "train.weight_decay",
      "train.images_per_step", "train.rois_per_image", "train.jitter", "train.seed",
      "train.full_k_mask", "train.checkpoint_every", "train.resume",
      "eval.dataset", "eval.checkpoint", "eval.jitter", "eval.seed", "eval.label",
      "eval.ap_breakout",
      "ablate.dataset", "ablate.eval_dataset", "ablate.head_modes", "ablate.sources",
      "ablate.archs", "ablate.mlp", "ablate.modes", "ablate.stop_grad", "ablate.seeds",
      "ablate.baseline", "ablate.threads", "ablate.split_mode", "ablate.split_sizes",
      "ablate.split_trials",
      "viz.dataset", "viz.checkpoint", "viz.count",
  };
  return keys;
}

GenConfig gen_config_from(const KvConfig& cfg) {
  GenConfig g;
  const int canvas = static_cast<int>(cfg.integer("gen.canvas", 128));
  g.canvas_h = g.canvas_w = canvas;
  g.min_instances = static_cast<int>(cfg.integer("gen.min_instances", 1));
  g.max_instances = static_cast<int>(cfg.integer("gen.max_instances", 4));
  g.min_size = cfg.real("gen.min_size", 0.15);
  g.max_size = cfg.real("gen.max_size", 0.45);
  g.max_overlap = cfg.real("gen.max_overlap", 0.2);
  g.noise = cfg.real("gen.noise", 0.05);
  g.validate();
  return g;
}

SplitConfig split_from(const KvConfig& cfg) {
  const std::string mode = cfg.str("split.mode", "fixed");
  check(mode == "fixed" || mode == "random", "config: split.mode must be fixed|random");
  return split_classes(kNumCategories, static_cast<int>(cfg.integer("split.a_size", 5)),
                       mode == "random", static_cast<uint64_t>(cfg.integer("split.seed", 0)));
}

ModelConfig model_config_from(const KvConfig& cfg) {
  ModelConfig mc;
  mc.num_classes = kNumCategories;
  mc.dims.D = static_cast<int>(cfg.integer("model.d", 128));
  mc.dims.E = static_cast<int>(cfg.integer("model.e", 32));
  mc.dims.M = static_cast<int>(cfg.integer("model.m", 14));
  mc.dims.S = static_cast<int>(cfg.integer("model.s", 7));
  mc.dims.mlp_hidden = static_cast<int>(cfg.integer("model.mlp_hidden", 128));
  mc.head_mode = head_mode_from(cfg.str("train.head_mode", "transfer"));
  mc.mlp_fusion = cfg.flag("train.mlp_fusion", false);
  mc.init_seed = static_cast<uint64_t>(cfg.integer("train.seed", 1));

  TransferSpec& ts = mc.transfer;
  ts.source = embedding_source_from(cfg.str("train.source", "cls+box"));
  ts.layers = static_cast<int>(cfg.integer("train.layers", 2));
  const std::string act = cfg.str("train.activation", "leaky_relu");
  check(act == "relu" || act == "leaky_relu", "config: train.activation must be relu|leaky_relu");
  ts.relu_act = act == "relu";
  ts.leaky_slope = static_cast<float>(cfg.real("train.leaky_slope", 0.01));
  ts.hidden = static_cast<int>(cfg.integer("train.hidden", 0));
  ts.stop_grad = cfg.flag("train.stop_grad", true);
  ts.randn_seed = static_cast<uint64_t>(cfg.integer("train.randn_seed", 1234));
  ts.external_path = cfg.str("train.external_path", "");
  ts.validate();
  return mc;
}

TrainConfig train_config_from(const KvConfig& cfg) {
  TrainConfig tc;
  tc.mode = train_mode_from(cfg.str("train.mode", "e2e"));
  tc.steps = static_cast<int>(cfg.integer("train.steps", 1000));
  tc.lr = static_cast<float>(cfg.real("train.lr", 0.02));
  tc.decay_steps = cfg.int_list("train.decay_steps", {600, 800});
  tc.decay_factor = static_cast<float>(cfg.real("train.decay_factor", 0.1));
  tc.momentum = static_cast<float>(cfg.real("train.momentum", 0.9));
  tc.weight_decay = static_cast<float>(cfg.real("train.weight_decay", 1e-4));
  tc.images_per_step = static_cast<int>(cfg.integer("train.images_per_step", 2));
  tc.rois_per_image = static_cast<int>(cfg.integer("train.rois_per_image", 8));
  tc.jitter = static_cast<float>(cfg.real("train.jitter", 0.1));
  tc.seed = static_cast<uint64_t>(cfg.integer("train.seed", 1));
  tc.full_k_mask = cfg.flag("train.full_k_mask", false);
  tc.validate();
  return tc;
}

EvalOptions eval_options_from(const KvConfig& cfg) {
  EvalOptions opt;
  opt.jitter = static_cast<float>(cfg.real("eval.jitter", 0.1));
  opt.jitter_seed = static_cast<uint64_t>(cfg.integer("eval.seed", 99));
  return opt;
}

uint64_t checkpoint_config_hash(const KvConfig& cfg) {
  // paths and checkpoint cadence do not change what the weights mean
  return cfg.subset_hash({"model.", "train.", "split."},
                         {"train.resume", "train.checkpoint_every", "train.dataset"});
}

namespace {

int cmd_gen_data(const KvConfig& cfg, const std::string& out) {
  const GenConfig gc = gen_config_from(cfg);
  const int images = static_cast<int>(cfg.integer("gen.images", 1000));
  const uint64_t seed = static_cast<uint64_t>(cfg.integer("gen.seed", 1));
  const Dataset ds = build_dataset(seed, images, gc);
  write_dataset(ds, out);
  write_run_metadata(out, cfg,
                     {{"config_hash", fnv1a64(cfg.serialize())},
                      {"gen_config_hash", gc.hash()},
                      {"dataset_hash", ds.content_hash()}});
  std::cout << "gen-data: " << images << " scenes, " << ds.instance_count() << " instances -> "
            << out << "\n";
  return 0;
}

int cmd_train(const KvConfig& cfg, const std::string& out) {
  const Dataset ds = read_dataset(cfg.require("train.dataset"));
  const SplitConfig split = split_from(cfg);
  const ModelConfig mc = model_config_from(cfg);
  const TrainConfig tc = train_config_from(cfg);
  const uint64_t ckpt_hash = checkpoint_config_hash(cfg);

  Model resume_model;
  const Model* resume = nullptr;
  int start_step = 0;
  if (cfg.has("train.resume")) {
    const CheckpointData data = load_checkpoint(cfg.require("train.resume"));
    check(data.config_hash == ckpt_hash,
          "train.resume: checkpoint was produced with a different configuration");
    resume_model = build_model(mc);
    apply_checkpoint(resume_model, data);
    start_step = static_cast<int>(data.step);
    resume = &resume_model;
  }

  fs::create_directories(out);
  const int every = static_cast<int>(cfg.integer("train.checkpoint_every", 0));
  auto on_ckpt = [&](const Model& m, int step) {
    save_checkpoint((fs::path(out) / ("checkpoint_" + std::to_string(step) + ".maskx")).string(),
                    m, step, ckpt_hash);
  };
  const TrainOutput result =
      train_model(ds, split, mc, tc, resume, start_step, every > 0 ? CheckpointFn(on_ckpt) : nullptr, every);

  write_loss_log((fs::path(out) / "loss_log.csv").string(), result.log);
  save_checkpoint((fs::path(out) / "checkpoint.maskx").string(), result.model, result.final_step,
                  ckpt_hash);
  write_run_metadata(out, cfg,
                     {{"config_hash", fnv1a64(cfg.serialize())},
                      {"dataset_hash", ds.content_hash()},
                      {"split_hash", split.hash()},
                      {"checkpoint_config_hash", ckpt_hash}});
  if (!result.log.empty()) {
    const LossRow& last = result.log.back();
    std::cout << "train: done at step " << result.final_step << " (cls " << last.cls << ", box "
              << last.box << ", mask " << last.mask << ") -> " << out << "\n";
  }
  return 0;
}

int cmd_eval(const KvConfig& cfg, const std::string& out) {
  const Dataset ds = read_dataset(cfg.require("eval.dataset"));
  const SplitConfig split = split_from(cfg);
  const ModelConfig mc = model_config_from(cfg);
  Model model = build_model(mc);
  const CheckpointData data = load_checkpoint(cfg.require("eval.checkpoint"));
  check(data.config_hash == checkpoint_config_hash(cfg),
        "eval: checkpoint was produced with a different configuration");
  apply_checkpoint(model, data);

  const std::vector<Detection> dets = run_inference(model, ds, eval_options_from(cfg));
  const EvalReport rep = coco_map(dets, ds, split);

  RunRecord rr;
  rr.label = cfg.str("eval.label", head_mode_name(mc.head_mode));
  rr.trial = 0;
  rr.report = rep;
  rr.split_hash = split.hash();
  rr.dataset_hash = ds.content_hash();
  const bool breakout = cfg.flag("eval.ap_breakout", false);
  const auto rows = ablation_report({rr}, rr.label, breakout);

  fs::create_directories(out);
  write_report_csv((fs::path(out) / "report.csv").string(), rows, breakout);
  write_per_class_csv((fs::path(out) / "report_classes.csv").string(), {rr});
  write_run_metadata(out, cfg,
                     {{"config_hash", fnv1a64(cfg.serialize())},
                      {"dataset_hash", rr.dataset_hash},
                      {"split_hash", rr.split_hash}});
  std::cout << "eval: AP_A " << rep.ap_a << ", AP_B " << rep.ap_b << " over " << rep.images
            << " images (" << rep.gt_instances << " GT, " << rep.predictions
            << " predictions) -> " << out << "\n";
  return 0;
}

std::string sanitize(const std::string& label) {
  std::string s = label;
  for (char& c : s)
    if (c == '|' || c == '+' || c == ' ' || c == '/') c = '_';
  return s;
}

struct AblateJob {
  std::string label;
  int trial = 0;
  SplitConfig split;
  ModelConfig mc;
  TrainConfig tc;
};

int cmd_ablate(const KvConfig& cfg, const std::string& out) {
  const Dataset train_ds = read_dataset(cfg.require("ablate.dataset"));
  const Dataset eval_ds = read_dataset(cfg.require("ablate.eval_dataset"));
  const EvalOptions eopt = eval_options_from(cfg);

  const auto head_modes = cfg.list("ablate.head_modes", {"transfer", "class-agnostic"});
  const auto sources = cfg.list("ablate.sources", {"cls+box"});
  const auto archs = cfg.list("ablate.archs", {"2-leaky_relu"});
  const auto mlps = cfg.list("ablate.mlp", {"off"});
  const auto modes = cfg.list("ablate.modes", {"e2e"});
  const auto stop_grads = cfg.list("ablate.stop_grad", {"on"});
  const auto seeds = cfg.int_list("ablate.seeds", {1, 2, 3});
  const std::string split_mode = cfg.str("ablate.split_mode", "fixed");
  check(split_mode == "fixed" || split_mode == "random",
        "config: ablate.split_mode must be fixed|random");
  const auto split_sizes =
      cfg.int_list("ablate.split_sizes", {static_cast<int>(cfg.integer("split.a_size", 5))});
  const int split_trials = static_cast<int>(cfg.integer("ablate.split_trials", 5));
  const int threads = std::max(1, static_cast<int>(cfg.integer("ablate.threads", 4)));

  const ModelConfig base_mc = model_config_from(cfg);
  const TrainConfig base_tc = train_config_from(cfg);

  // method grid; non-transfer heads collapse the transfer axes
  struct MethodCell {
    std::string label;
    ModelConfig mc;
    TrainConfig tc;
  };
  std::vector<MethodCell> cells;
  auto add_cell = [&](const MethodCell& c) {
    for (const MethodCell& e : cells)
      if (e.label == c.label) return;
    cells.push_back(c);
  };
  for (const std::string& hm_name : head_modes) {
    const HeadMode hm = head_mode_from(hm_name);
    for (const std::string& mode_name : modes) {
      for (const std::string& mlp : mlps) {
        MethodCell c;
        c.mc = base_mc;
        c.tc = base_tc;
        c.mc.head_mode = hm;
        c.mc.mlp_fusion = mlp == "on";
        c.tc.mode = train_mode_from(mode_name);
        const std::string tail = "|" + mode_name + "|mlp" + (c.mc.mlp_fusion ? "1" : "0");
        if (hm != HeadMode::Transfer) {
          c.label = hm_name + tail;
          add_cell(c);
          continue;
        }
        for (const std::string& src : sources) {
          for (const std::string& arch : archs) {
            for (const std::string& sg : stop_grads) {
              MethodCell tcell = c;
              tcell.mc.transfer.source = embedding_source_from(src);
              const size_t dash = arch.find('-');
              check(dash != std::string::npos, "config: ablate.archs entries look like 2-leaky_relu");
              tcell.mc.transfer.layers = std::stoi(arch.substr(0, dash));
              const std::string act = arch.substr(dash + 1);
              check(act == "none" || act == "relu" || act == "leaky_relu",
                    "config: unknown activation in ablate.archs: " + act);
              tcell.mc.transfer.relu_act = act == "relu";
              tcell.mc.transfer.stop_grad = sg == "on";
              tcell.label = "transfer|" + src + "|" + arch + "|" + mode_name + "|sg" +
                            (tcell.mc.transfer.stop_grad ? "1" : "0") + "|mlp" +
                            (tcell.mc.mlp_fusion ? "1" : "0");
              add_cell(tcell);
            }
          }
        }
      }
    }
  }

  // split instances x trials
  std::vector<AblateJob> jobs;
  const uint64_t split_seed = static_cast<uint64_t>(cfg.integer("split.seed", 0));
  for (const MethodCell& cell : cells) {
    if (split_mode == "fixed") {
      const SplitConfig split = split_from(cfg);
      for (size_t t = 0; t < seeds.size(); ++t) {
        AblateJob j;
        j.label = cell.label;
        j.trial = static_cast<int>(t);
        j.split = split;
        j.mc = cell.mc;
        j.tc = cell.tc;
        j.tc.seed = static_cast<uint64_t>(seeds[t]);
        j.mc.init_seed = static_cast<uint64_t>(seeds[t]);
        jobs.push_back(std::move(j));
      }
    } else {
      for (int size : split_sizes) {
        for (int t = 0; t < split_trials; ++t) {
          AblateJob j;
          j.label = cell.label + "|a" + std::to_string(size);
          j.trial = t;
          j.split = split_classes(kNumCategories, size, true,
                                  mix_seed(split_seed, static_cast<uint64_t>(size * 1000 + t)));
          j.mc = cell.mc;
          j.tc = cell.tc;
          j.tc.seed = mix_seed(base_tc.seed, static_cast<uint64_t>(size * 1000 + t));
          j.mc.init_seed = j.tc.seed;
          jobs.push_back(std::move(j));
        }
      }
    }
  }

  fs::create_directories(fs::path(out) / "cells");
  std::vector<RunRecord> records(jobs.size());
  std::vector<std::vector<LossRow>> logs(jobs.size());
  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::string fail_msg;
  std::mutex fail_mu;

  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size() || failed.load()) return;
      try {
        const AblateJob& j = jobs[i];
        const TrainOutput to = train_model(train_ds, j.split, j.mc, j.tc);
        Model model = to.model;
        const auto dets = run_inference(model, eval_ds, eopt);
        RunRecord rr;
        rr.label = j.label;
        rr.trial = j.trial;
        rr.report = coco_map(dets, eval_ds, j.split);
        rr.split_hash = j.split.hash();
        rr.dataset_hash = eval_ds.content_hash();
        records[i] = std::move(rr);
        logs[i] = to.log;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(fail_mu);
        failed = true;
        fail_msg = e.what();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  check(!failed.load(), "ablate worker failed: " + fail_msg);

  for (size_t i = 0; i < jobs.size(); ++i) {
    const std::string cell_dir =
        (fs::path(out) / "cells" / (sanitize(jobs[i].label) + "-t" + std::to_string(jobs[i].trial)))
            .string();
    fs::create_directories(cell_dir);
    write_loss_log((fs::path(cell_dir) / "loss_log.csv").string(), logs[i]);
  }

  const std::string baseline = cfg.str("ablate.baseline", "class-agnostic|e2e|mlp0");
  const auto rows = ablation_report(records, baseline);
  write_report_csv((fs::path(out) / "ablation.csv").string(), rows);
  write_per_class_csv((fs::path(out) / "ablation_classes.csv").string(), records);
  write_run_metadata(out, cfg,
                     {{"config_hash", fnv1a64(cfg.serialize())},
                      {"dataset_hash", eval_ds.content_hash()}});
  std::cout << "ablate: " << jobs.size() << " runs, " << rows.size() << " report rows -> " << out
            << "\n";
  for (const AblationRow& r : rows)
    std::cout << "  " << r.label << ": AP_B " << r.mean_ap_b << " AP_A " << r.mean_ap_a
              << " rel " << r.rel_change_b << "\n";
  return 0;
}

int cmd_viz(const KvConfig& cfg, const std::string& out) {
  const Dataset ds = read_dataset(cfg.require("viz.dataset"));
  const SplitConfig split = split_from(cfg);
  const int count = static_cast<int>(cfg.integer("viz.count", 8));
  Model model;
  Model* model_ptr = nullptr;
  if (cfg.has("viz.checkpoint")) {
    model = build_model(model_config_from(cfg));
    const CheckpointData data = load_checkpoint(cfg.require("viz.checkpoint"));
    check(data.config_hash == checkpoint_config_hash(cfg),
          "viz: checkpoint was produced with a different configuration");
    apply_checkpoint(model, data);
    model_ptr = &model;
  }
  write_overlays(ds, split, out, count, model_ptr, eval_options_from(cfg));
  write_run_metadata(out, cfg,
                     {{"config_hash", fnv1a64(cfg.serialize())},
                      {"dataset_hash", ds.content_hash()},
                      {"split_hash", split.hash()}});
  std::cout << "viz: wrote " << std::min<int>(count, static_cast<int>(ds.records.size()))
            << " overlays -> " << out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"partially supervised instance segmentation on synthetic shapes"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  const std::vector<std::pair<std::string, std::string>> subs = {
      {"gen-data", "generate a synthetic dataset"},
      {"train", "train a model on a dataset"},
      {"eval", "evaluate a checkpoint (mask AP)"},
      {"ablate", "run an ablation grid and report"},
      {"viz", "write overlay images"},
  };
  for (const auto& [name, desc] : subs) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "run configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--set", sets, "override a config key (key=value)");
  }

  std::vector<std::string> argv_like = {"maskx"};
  argv_like.insert(argv_like.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const std::string& a : argv_like) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    KvConfig cfg = KvConfig::from_file(config_path);
    for (const std::string& s : sets) cfg.set_pair(s);
    cfg.require_known(known_config_keys());

    const std::string sub = app.get_subcommands().front()->get_name();
    fs::create_directories(out_dir);
    if (sub == "gen-data") return cmd_gen_data(cfg, out_dir);
    if (sub == "train") return cmd_train(cfg, out_dir);
    if (sub == "eval") return cmd_eval(cfg, out_dir);
    if (sub == "ablate") return cmd_ablate(cfg, out_dir);
    if (sub == "viz") return cmd_viz(cfg, out_dir);
    std::cerr << "unknown subcommand " << sub << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace maskx
