#include "maskx/train.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace maskx {

void TrainConfig::validate() const {
  check(steps >= 1, "train: steps must be >= 1");
  check(lr >= 0, "train: lr must be >= 0");
  check(decay_factor > 0 && decay_factor <= 1, "train: decay factor must be in (0,1]");
  for (size_t i = 0; i < decay_steps.size(); ++i) {
    check(decay_steps[i] < steps, "train: decay steps must be < total steps");
    if (i) check(decay_steps[i] > decay_steps[i - 1], "train: decay steps must ascend");
  }
  check(images_per_step >= 1, "train: images_per_step must be >= 1");
  check(rois_per_image >= 2, "train: rois_per_image must be >= 2");
  check(jitter >= 0 && jitter < 0.5, "train: jitter must be in [0, 0.5)");
}

TrainConfig::Mode train_mode_from(const std::string& name) {
  if (name == "stagewise") return TrainConfig::Mode::Stagewise;
  if (name == "e2e") return TrainConfig::Mode::E2e;
  fail("unknown training mode '" + name + "' (stagewise|e2e)");
}

std::string train_mode_name(TrainConfig::Mode m) {
  return m == TrainConfig::Mode::Stagewise ? "stagewise" : "e2e";
}

float lr_at(const TrainConfig& cfg, int step) {
  float lr = cfg.lr;
  for (int d : cfg.decay_steps)
    if (step >= d) lr *= cfg.decay_factor;
  return lr;
}

namespace {

Box jitter_box(const Box& b, double amount, Rng& rng, int img_w, int img_h) {
  const double w = b.width(), h = b.height();
  const double cx = b.x0 + w / 2.0 + rng.uniform(-amount, amount) * w;
  const double cy = b.y0 + h / 2.0 + rng.uniform(-amount, amount) * h;
  const double nw = w * (1.0 + rng.uniform(-amount, amount));
  const double nh = h * (1.0 + rng.uniform(-amount, amount));
  return to_pixel_box({cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0 - 1.0, cy + nh / 2.0 - 1.0},
                      img_w, img_h);
}

}  // namespace

StepBatch sample_batch(const Dataset& ds, const TrainConfig& cfg, int step) {
  Rng rng(mix_seed(mix_seed(cfg.seed, 0xba7c4), static_cast<uint64_t>(step)));
  StepBatch batch;
  const int n = static_cast<int>(ds.records.size());
  for (int i = 0; i < cfg.images_per_step; ++i)
    batch.image_ids.push_back(rng.uniform_int(0, n - 1));

  const int fg_cap = cfg.rois_per_image / 2;
  for (size_t slot = 0; slot < batch.image_ids.size(); ++slot) {
    const SceneRecord& rec = ds.records[static_cast<size_t>(batch.image_ids[slot])];
    const int fg_count = std::min(fg_cap, static_cast<int>(rec.instances.size()));
    for (int k = 0; k < fg_count; ++k) {
      const Instance& inst = rec.instances[static_cast<size_t>(k)];
      RoiSample s;
      s.image_slot = static_cast<int>(slot);
      s.roi = jitter_box(inst.box, cfg.jitter, rng, rec.w, rec.h);
      s.label = inst.category + 1;
      s.instance_index = k;
      batch.rois.push_back(s);
    }
    // background boxes: IoU < 0.3 against every GT box
    int placed = 0;
    for (int attempt = 0; attempt < 50 && placed < fg_count; ++attempt) {
      const double side = rng.uniform(0.12, 0.5) * std::min(rec.w, rec.h);
      const double ar = rng.uniform(0.7, 1.4);
      const double bw = std::max(6.0, side * ar), bh = std::max(6.0, side / ar);
      const double x0 = rng.uniform(0, std::max(1.0, rec.w - bw));
      const double y0 = rng.uniform(0, std::max(1.0, rec.h - bh));
      const Box cand = to_pixel_box({x0, y0, x0 + bw - 1, y0 + bh - 1}, rec.w, rec.h);
      bool clear = true;
      for (const Instance& inst : rec.instances) {
        if (box_iou(cand, inst.box) >= 0.3) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      RoiSample s;
      s.image_slot = static_cast<int>(slot);
      s.roi = cand;
      s.label = 0;
      batch.rois.push_back(s);
      ++placed;
    }
  }
  return batch;
}

LossBundle compute_losses(TapeModel& tm, const Dataset& ds, const StepBatch& batch,
                          const SplitConfig& split, const LossEnable& enable) {
  Tape& t = tm.tape();
  Model& m = tm.model();
  const int C = m.cfg.num_classes;
  const HeadDims& dims = m.cfg.dims;
  const int stride = m.cfg.backbone.total_stride();
  check(static_cast<int>(split.a.size() + split.b.size()) == C,
        "compute_losses: split does not cover the vocabulary");

  std::vector<Tape::Id> feats;
  feats.reserve(batch.image_ids.size());
  for (int img : batch.image_ids)
    feats.push_back(backbone_forward(tm, image_tensor(ds.records[static_cast<size_t>(img)])));

  std::vector<const RoiSample*> fg, bg;
  for (const RoiSample& r : batch.rois) (r.label > 0 ? fg : bg).push_back(&r);
  std::vector<const RoiSample*> ordered = fg;
  ordered.insert(ordered.end(), bg.begin(), bg.end());

  LossBundle out;
  out.cls = {t.zero_scalar(), 0};
  out.box = {t.zero_scalar(), 0};
  out.mask = {t.zero_scalar(), 0};

  if ((enable.cls || enable.box) && !ordered.empty()) {
    std::vector<Tape::Id> rows;
    std::vector<int> labels;
    rows.reserve(ordered.size());
    for (const RoiSample* r : ordered) {
      rows.push_back(t.flatten(crop_resize(t, feats[static_cast<size_t>(r->image_slot)],
                                           to_boxf(r->roi), dims.S, stride)));
      labels.push_back(r->label);
    }
    const Tape::Id roi_mat = rows.size() == 1 ? rows[0] : t.concat(rows, 0);
    const BoxHeadOut bh = box_head_forward(tm, roi_mat);
    if (enable.cls) out.cls = t.softmax_ce(bh.logits, labels);
    if (enable.box && !fg.empty()) {
      const Tape::Id fg_deltas = t.slice_rows(bh.deltas, 0, static_cast<int>(fg.size()));
      std::vector<int> offsets;
      Tensor targets({static_cast<int>(fg.size()), 4});
      for (size_t i = 0; i < fg.size(); ++i) {
        const RoiSample* r = fg[i];
        offsets.push_back(4 * (r->label - 1));
        const SceneRecord& rec =
            ds.records[static_cast<size_t>(batch.image_ids[static_cast<size_t>(r->image_slot)])];
        float enc[4];
        encode_box(r->roi, rec.instances[static_cast<size_t>(r->instance_index)].box, enc);
        for (int j = 0; j < 4; ++j) targets.at2(static_cast<int>(i), j) = enc[j];
      }
      out.box = t.smooth_l1(t.select_cols4(fg_deltas, offsets), targets);
    }
  }

  if (enable.mask) {
    const bool oracle = m.cfg.head_mode == HeadMode::Oracle;
    std::vector<const RoiSample*> mask_rois;
    for (const RoiSample* r : fg)
      if (oracle || split.in_a(r->label - 1)) mask_rois.push_back(r);
    if (!mask_rois.empty()) {
      const Tape::Id wseg =
          m.cfg.head_mode == HeadMode::ClassAgnostic ? Tape::kNone : wseg_rows(tm);
      std::vector<Tape::Id> picked;
      std::vector<Tensor> target_rows;
      for (const RoiSample* r : mask_rois) {
        const Tape::Id crop = crop_resize(t, feats[static_cast<size_t>(r->image_slot)],
                                          to_boxf(r->roi), dims.M, stride);
        Tape::Id logits = mask_class_logits(tm, mask_fcn_forward(tm, crop), wseg);
        if (m.cfg.mlp_fusion) logits = fuse_mask_logits(t, logits, mlp_mask_logits(tm, crop));
        const Tape::Id flat = t.reshape(logits, {C, dims.M * dims.M});
        const SceneRecord& rec =
            ds.records[static_cast<size_t>(batch.image_ids[static_cast<size_t>(r->image_slot)])];
        Tensor target = make_mask_target(
            rec.instances[static_cast<size_t>(r->instance_index)].mask, r->roi, dims.M);
        target.shape = {1, dims.M * dims.M};
        if (enable.full_k) {
          picked.push_back(flat);
          Tensor tiled({C, dims.M * dims.M});
          for (int k = 0; k < C; ++k)
            std::copy(target.v.begin(), target.v.end(),
                      tiled.v.begin() + static_cast<int64_t>(k) * dims.M * dims.M);
          target_rows.push_back(std::move(tiled));
        } else {
          picked.push_back(t.slice_rows(flat, r->label - 1, r->label));
          target_rows.push_back(std::move(target));
        }
      }
      const Tape::Id pred = picked.size() == 1 ? picked[0] : t.concat(picked, 0);
      int total_rows = 0;
      for (const Tensor& tr : target_rows) total_rows += tr.dim(0);
      Tensor targets({total_rows, dims.M * dims.M});
      int at = 0;
      for (const Tensor& tr : target_rows) {
        std::copy(tr.v.begin(), tr.v.end(),
                  targets.v.begin() + static_cast<int64_t>(at) * dims.M * dims.M);
        at += tr.dim(0);
      }
      out.mask = t.bce_with_logits(pred, std::move(targets));
    }
  }

  out.total = t.add(t.add(out.cls.id, out.box.id), out.mask.id);
  return out;
}

StepOutcome run_train_step(Model& model, const Dataset& ds, const SplitConfig& split,
                           const TrainConfig& cfg, int step, float lr, const LossEnable& enable,
                           const std::function<bool(const std::string&)>& trainable) {
  const StepBatch batch = sample_batch(ds, cfg, step);
  Tape tape;
  TapeModel tm(tape, model, trainable);
  const LossBundle lb = compute_losses(tm, ds, batch, split, enable);
  tape.backward(lb.total);
  const SgdConfig sgd{lr, cfg.momentum, cfg.weight_decay};
  for (const auto& [pi, leaf] : tm.touched()) {
    if (!tape.has_grad(leaf)) continue;
    Param& p = model.params.at(pi);
    sgd_momentum_step(p.value, tape.grad(leaf), p.vel, sgd);
  }
  StepOutcome so;
  so.cls = tape.value(lb.cls.id).v[0];
  so.box = tape.value(lb.box.id).v[0];
  so.mask = tape.value(lb.mask.id).v[0];
  so.mask_empty = lb.mask.empty();
  return so;
}

TrainOutput train_model(const Dataset& ds, const SplitConfig& split, const ModelConfig& mc,
                        const TrainConfig& tc, const Model* resume_from, int start_step,
                        const CheckpointFn& on_checkpoint, int checkpoint_every) {
  tc.validate();
  check(!ds.records.empty(), "train: empty dataset");
  for (const SceneRecord& r : ds.records)
    for (const Instance& inst : r.instances)
      check(inst.category >= 0 && inst.category < mc.num_classes,
            "train: dataset/split vocabulary mismatch");
  check(static_cast<int>(split.a.size() + split.b.size()) == mc.num_classes,
        "train: dataset/split vocabulary mismatch");

  TrainOutput out;
  out.model = build_model(mc);
  if (resume_from) out.model = *resume_from;

  const bool stagewise = tc.mode == TrainConfig::Mode::Stagewise;
  const int total_steps = stagewise ? 2 * tc.steps : tc.steps;
  check(start_step >= 0 && start_step <= total_steps, "train: bad start step");

  auto stage1_trainable = [](const std::string& n) {
    return n.rfind("bb.", 0) == 0 || n.rfind("box.", 0) == 0;
  };
  auto stage2_trainable = [](const std::string& n) {
    return n.rfind("mask.", 0) == 0 || n.rfind("mlp.", 0) == 0 || n.rfind("transfer.", 0) == 0;
  };
  auto all_trainable = [](const std::string&) { return true; };

  for (int step = start_step; step < total_steps; ++step) {
    LossEnable enable;
    enable.full_k = tc.full_k_mask;
    std::function<bool(const std::string&)> trainable;
    int sched_step = step;
    if (stagewise) {
      if (step < tc.steps) {
        enable.mask = false;
        trainable = stage1_trainable;
      } else {
        enable.cls = false;
        enable.box = false;
        trainable = stage2_trainable;
        sched_step = step - tc.steps;
      }
    } else {
      trainable = all_trainable;
    }
    const float lr = lr_at(tc, sched_step);
    const StepOutcome so = run_train_step(out.model, ds, split, tc, step, lr, enable, trainable);
    out.log.push_back({step, lr, so.cls, so.box, so.mask});
    if (on_checkpoint && checkpoint_every > 0 && (step + 1) % checkpoint_every == 0)
      on_checkpoint(out.model, step + 1);
  }
  out.final_step = total_steps;
  return out;
}

void write_loss_log(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write loss log " + path);
  f << "step,lr,cls_loss,box_loss,mask_loss\n";
  char buf[160];
  for (const LossRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%g,%.6f,%.6f,%.6f\n", r.step, static_cast<double>(r.lr),
                  static_cast<double>(r.cls), static_cast<double>(r.box),
                  static_cast<double>(r.mask));
    f << buf;
  }
}

namespace {

constexpr char kCkptMagic[6] = {'M', 'A', 'S', 'K', 'X', '1'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& pos) {
  check(pos + sizeof(T) <= buf.size(), "checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void put_block(std::string& buf, const std::string& name, const Tensor& t) {
  put<uint32_t>(buf, static_cast<uint32_t>(name.size()));
  buf.append(name);
  put<uint32_t>(buf, static_cast<uint32_t>(t.ndims()));
  for (int d : t.shape) put<int32_t>(buf, d);
  put<uint64_t>(buf, static_cast<uint64_t>(t.numel()));
  buf.append(reinterpret_cast<const char*>(t.v.data()), t.v.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, int step,
                     uint64_t config_hash) {
  std::string payload;
  put<uint32_t>(payload, kCkptVersion);
  put<uint64_t>(payload, config_hash);
  put<int64_t>(payload, static_cast<int64_t>(step));
  put<uint32_t>(payload, static_cast<uint32_t>(2 * model.params.size()));
  for (int i = 0; i < model.params.size(); ++i) {
    const Param& p = model.params.at(i);
    put_block(payload, "p:" + p.name, p.value);
    put_block(payload, "v:" + p.name, p.vel);
  }
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write checkpoint " + path);
  f.write(kCkptMagic, sizeof(kCkptMagic));
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  f.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
  check(f.good(), "checkpoint write failed " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  check(bytes.size() > sizeof(kCkptMagic) + sizeof(uint32_t), "checkpoint: truncated file");
  check(std::memcmp(bytes.data(), kCkptMagic, sizeof(kCkptMagic)) == 0,
        "checkpoint: bad magic string");
  const std::string payload =
      bytes.substr(sizeof(kCkptMagic), bytes.size() - sizeof(kCkptMagic) - sizeof(uint32_t));
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - sizeof(uint32_t), sizeof(uint32_t));
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
  check(crc == stored_crc, "checkpoint: checksum mismatch");

  CheckpointData data;
  size_t pos = 0;
  data.version = take<uint32_t>(payload, pos);
  check(data.version == kCkptVersion, "checkpoint: unsupported version");
  data.config_hash = take<uint64_t>(payload, pos);
  data.step = take<int64_t>(payload, pos);
  const uint32_t nblocks = take<uint32_t>(payload, pos);
  for (uint32_t b = 0; b < nblocks; ++b) {
    const uint32_t name_len = take<uint32_t>(payload, pos);
    check(pos + name_len <= payload.size(), "checkpoint: truncated file");
    std::string name = payload.substr(pos, name_len);
    pos += name_len;
    const uint32_t ndims = take<uint32_t>(payload, pos);
    std::vector<int> shape;
    for (uint32_t d = 0; d < ndims; ++d) shape.push_back(take<int32_t>(payload, pos));
    const uint64_t count = take<uint64_t>(payload, pos);
    Tensor t(shape);
    check(t.numel() == static_cast<int64_t>(count), "checkpoint: block size mismatch");
    check(pos + count * sizeof(float) <= payload.size(), "checkpoint: truncated file");
    std::memcpy(t.v.data(), payload.data() + pos, count * sizeof(float));
    pos += count * sizeof(float);
    data.blocks.emplace_back(std::move(name), std::move(t));
  }
  check(pos == payload.size(), "checkpoint: trailing bytes");
  return data;
}

void apply_checkpoint(Model& model, const CheckpointData& data) {
  size_t used = 0;
  auto find_block = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : data.blocks) {
      if (n == name) {
        ++used;
        return t;
      }
    }
    fail("checkpoint: missing block " + name);
  };
  for (int i = 0; i < model.params.size(); ++i) {
    Param& p = model.params.at(i);
    const Tensor& val = find_block("p:" + p.name);
    check(val.shape == p.value.shape, "checkpoint: shape mismatch for " + p.name);
    const Tensor& vel = find_block("v:" + p.name);
    check(vel.shape == p.vel.shape, "checkpoint: shape mismatch for velocity of " + p.name);
    p.value = val;
    p.vel = vel;
  }
  check(used == data.blocks.size(), "checkpoint: extra blocks do not match this model");
}

}  // namespace maskx
