#include "maskx/heads.hpp"

#include <algorithm>
#include <cmath>

#include "maskx/bilinear.hpp"

namespace maskx {

HeadMode head_mode_from(const std::string& name) {
  if (name == "oracle") return HeadMode::Oracle;
  if (name == "class-agnostic") return HeadMode::ClassAgnostic;
  if (name == "transfer") return HeadMode::Transfer;
  fail("unknown head mode '" + name + "' (oracle|class-agnostic|transfer)");
}

std::string head_mode_name(HeadMode m) {
  switch (m) {
    case HeadMode::Oracle: return "oracle";
    case HeadMode::ClassAgnostic: return "class-agnostic";
    case HeadMode::Transfer: return "transfer";
  }
  return "?";
}

int ParamStore::add(const std::string& name, std::vector<int> shape) {
  check(index_.find(name) == index_.end(), "duplicate parameter " + name);
  Param p;
  p.name = name;
  p.value = Tensor(shape);
  p.vel = Tensor(std::move(shape));
  items_.push_back(std::move(p));
  index_[name] = static_cast<int>(items_.size()) - 1;
  return static_cast<int>(items_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

Param& ParamStore::get(const std::string& name) {
  const int i = find(name);
  check(i >= 0, "unknown parameter " + name);
  return items_[static_cast<size_t>(i)];
}

const Param& ParamStore::get(const std::string& name) const {
  const int i = find(name);
  check(i >= 0, "unknown parameter " + name);
  return items_[static_cast<size_t>(i)];
}

namespace {

void init_normal(Tensor& t, uint64_t seed, double std) {
  Rng rng(seed);
  for (auto& x : t.v) x = static_cast<float>(rng.normal() * std);
}

/// Fan-in init for a bias-column dense matrix [out, in+1]; bias stays 0.
void init_dense(Tensor& w, uint64_t seed, double scale = 1.0) {
  const int out = w.dim(0), in1 = w.dim(1);
  const double std = scale * std::sqrt(2.0 / (in1 - 1));
  Rng rng(seed);
  for (int o = 0; o < out; ++o)
    for (int i = 0; i < in1 - 1; ++i) w.at2(o, i) = static_cast<float>(rng.normal() * std);
}

uint64_t param_seed(uint64_t init_seed, const std::string& name) {
  return mix_seed(init_seed, fnv1a64(name));
}

}  // namespace

Model build_model(const ModelConfig& cfg) {
  check(cfg.num_classes >= 1, "model: need at least one class");
  cfg.transfer.validate();
  Model m;
  m.cfg = cfg;
  const int C = cfg.num_classes;
  const HeadDims& d = cfg.dims;
  const int Cf = cfg.backbone.out_channels();

  int cin = 3;
  for (size_t i = 0; i < cfg.backbone.stages.size(); ++i) {
    const ConvStage& st = cfg.backbone.stages[i];
    const std::string base = "bb.conv" + std::to_string(i);
    const int wi = m.params.add(base + ".w", {st.out_channels, cin, st.kernel, st.kernel});
    m.params.add(base + ".b", {st.out_channels});
    init_normal(m.params.at(wi).value, param_seed(cfg.init_seed, base + ".w"),
                std::sqrt(2.0 / (cin * st.kernel * st.kernel)));
    cin = st.out_channels;
  }

  auto add_dense = [&](const std::string& name, int out, int in, double scale = 1.0) {
    const int i = m.params.add(name, {out, in + 1});
    init_dense(m.params.at(i).value, param_seed(cfg.init_seed, name), scale);
  };

  add_dense("box.trunk.w", d.D, Cf * d.S * d.S);
  add_dense("box.cls.w", C + 1, d.D);
  add_dense("box.box.w", 4 * C, d.D);

  for (int i = 0; i < 2; ++i) {
    const std::string base = "mask.conv" + std::to_string(i);
    const int in_ch = i == 0 ? Cf : d.E;
    const int wi = m.params.add(base + ".w", {d.E, in_ch, 3, 3});
    m.params.add(base + ".b", {d.E});
    init_normal(m.params.at(wi).value, param_seed(cfg.init_seed, base + ".w"),
                std::sqrt(2.0 / (in_ch * 9)));
  }

  switch (cfg.head_mode) {
    case HeadMode::Oracle:
      add_dense("mask.wseg", C, d.E);
      break;
    case HeadMode::ClassAgnostic:
      add_dense("mask.wseg_shared", 1, d.E);
      break;
    case HeadMode::Transfer: {
      if (cfg.transfer.source == EmbeddingSource::External) {
        m.external_embedding = load_external_embedding(cfg.transfer.external_path, C);
      }
      const int din = cfg.transfer.source == EmbeddingSource::External
                          ? m.external_embedding.dim(1)
                          : embedding_width(cfg.transfer.source, d.D);
      const int hidden = cfg.transfer.hidden > 0 ? cfg.transfer.hidden : d.E + 1;
      int in = din;
      for (int l = 0; l < cfg.transfer.layers; ++l) {
        const bool last = l == cfg.transfer.layers - 1;
        const int out = last ? d.E + 1 : hidden;
        // final layer starts small so early predicted w_seg stay tame
        add_dense("transfer.l" + std::to_string(l) + ".w", out, in, last ? 0.1 : 1.0);
        in = out;
      }
      break;
    }
  }

  if (cfg.mlp_fusion) {
    add_dense("mlp.fc1.w", d.mlp_hidden, Cf * d.M * d.M);
    add_dense("mlp.fc2.w", d.M * d.M, d.mlp_hidden);
  }
  return m;
}

TapeModel::TapeModel(Tape& tape, Model& model, std::function<bool(const std::string&)> trainable)
    : tape_(tape), model_(model), trainable_(std::move(trainable)) {
  leaf_of_.assign(static_cast<size_t>(model.params.size()), Tape::kNone);
}

Tape::Id TapeModel::param(const std::string& name) {
  const int i = model_.params.find(name);
  check(i >= 0, "TapeModel: unknown parameter " + name);
  if (leaf_of_[static_cast<size_t>(i)] == Tape::kNone) {
    const bool rg = trainable_ && trainable_(name);
    leaf_of_[static_cast<size_t>(i)] = tape_.leaf(model_.params.at(i).value, rg);
    touched_.emplace_back(i, leaf_of_[static_cast<size_t>(i)]);
  }
  return leaf_of_[static_cast<size_t>(i)];
}

Tensor image_tensor(const SceneRecord& rec) {
  Tensor t({3, rec.h, rec.w});
  for (int y = 0; y < rec.h; ++y)
    for (int x = 0; x < rec.w; ++x)
      for (int c = 0; c < 3; ++c) t.at3(c, y, x) = rec.pixel(y, x, c) - 0.5f;
  return t;
}

Tape::Id backbone_forward(TapeModel& tm, const Tensor& image_chw) {
  check(image_chw.ndims() == 3 && image_chw.dim(0) == 3, "backbone: image must be [3,H,W]");
  const BackboneConfig& bb = tm.model().cfg.backbone;
  const int stride = bb.total_stride();
  check(image_chw.dim(1) % stride == 0 && image_chw.dim(2) % stride == 0,
        "backbone: image dims must be divisible by total stride");
  Tape& t = tm.tape();
  Tape::Id x = t.leaf(image_chw, false);
  for (size_t i = 0; i < bb.stages.size(); ++i) {
    const ConvStage& st = bb.stages[i];
    const std::string base = "bb.conv" + std::to_string(i);
    x = t.conv2d(x, tm.param(base + ".w"), tm.param(base + ".b"), st.stride,
                 (st.kernel - 1) / 2);
    x = t.relu(x);
  }
  return x;
}

Tape::Id crop_resize(Tape& tape, Tape::Id features, const BoxF& box_pixels, int out_size,
                     int stride) {
  const TensorT<float>& f = tape.value(features);
  check(f.ndims() == 3, "crop_resize: features must be [C,h,w]");
  RectF r;
  r.x0 = box_pixels.x0 / stride;
  r.y0 = box_pixels.y0 / stride;
  r.x1 = (box_pixels.x1 + 1) / stride;
  r.y1 = (box_pixels.y1 + 1) / stride;
  r.x0 = std::max(0.0, std::min(r.x0, static_cast<double>(f.dim(2))));
  r.x1 = std::max(0.0, std::min(r.x1, static_cast<double>(f.dim(2))));
  r.y0 = std::max(0.0, std::min(r.y0, static_cast<double>(f.dim(1))));
  r.y1 = std::max(0.0, std::min(r.y1, static_cast<double>(f.dim(1))));
  check(r.width() >= 1.0 && r.height() >= 1.0,
        "crop_resize: degenerate box (under one feature pixel)");
  return tape.bilinear_crop(features, r, out_size, out_size);
}

BoxHeadOut box_head_forward(TapeModel& tm, Tape::Id roi_rows) {
  Tape& t = tm.tape();
  const Tape::Id h = t.relu(t.linear(roi_rows, tm.param("box.trunk.w")));
  return {t.linear(h, tm.param("box.cls.w")), t.linear(h, tm.param("box.box.w"))};
}

Tape::Id wseg_rows(TapeModel& tm) {
  Tape& t = tm.tape();
  const ModelConfig& cfg = tm.model().cfg;
  switch (cfg.head_mode) {
    case HeadMode::Oracle:
      return tm.param("mask.wseg");
    case HeadMode::ClassAgnostic:
      return t.tile(tm.param("mask.wseg_shared"), 0, cfg.num_classes);
    case HeadMode::Transfer:
      return transfer_forward(tm, build_class_embedding(tm, cfg.transfer), cfg.transfer);
  }
  fail("wseg_rows: bad head mode");
}

Tape::Id mask_fcn_forward(TapeModel& tm, Tape::Id roi_feature) {
  Tape& t = tm.tape();
  Tape::Id x = roi_feature;
  for (int i = 0; i < 2; ++i) {
    const std::string base = "mask.conv" + std::to_string(i);
    x = t.relu(t.conv2d(x, tm.param(base + ".w"), tm.param(base + ".b"), 1, 1));
  }
  return x;
}

Tape::Id mask_logits_from_wseg(Tape& tape, Tape::Id fcn_features, Tape::Id wseg) {
  const TensorT<float>& f = tape.value(fcn_features);
  check(f.ndims() == 3, "mask_logits: features must be [E,M,M]");
  const int e = f.dim(0), mh = f.dim(1), mw = f.dim(2);
  const TensorT<float>& w = tape.value(wseg);
  check(w.ndims() == 2 && w.dim(1) == e + 1, "mask_logits: w_seg must be [K,E+1]");
  const int k = w.dim(0);
  const Tape::Id flat = tape.reshape(fcn_features, {e, mh * mw});
  const Tape::Id per_pixel = tape.linear(tape.transpose(flat), wseg);  // [MM, K]
  return tape.reshape(tape.transpose(per_pixel), {k, mh, mw});
}

Tape::Id mask_class_logits(TapeModel& tm, Tape::Id fcn_features, Tape::Id wseg) {
  Tape& t = tm.tape();
  const ModelConfig& cfg = tm.model().cfg;
  if (cfg.head_mode == HeadMode::ClassAgnostic) {
    const Tape::Id one = mask_logits_from_wseg(t, fcn_features, tm.param("mask.wseg_shared"));
    return t.tile(one, 0, cfg.num_classes);
  }
  check(wseg != Tape::kNone, "mask_class_logits: w_seg rows required");
  return mask_logits_from_wseg(t, fcn_features, wseg);
}

Tape::Id mlp_mask_logits(TapeModel& tm, Tape::Id roi_feature) {
  Tape& t = tm.tape();
  const int m = tm.model().cfg.dims.M;
  const Tape::Id x = t.flatten(roi_feature);
  const Tape::Id h = t.relu(t.linear(x, tm.param("mlp.fc1.w")));
  return t.reshape(t.linear(h, tm.param("mlp.fc2.w")), {1, m, m});
}

Tape::Id fuse_mask_logits(Tape& tape, Tape::Id fcn_logits, Tape::Id mlp_logits) {
  const int k = tape.value(fcn_logits).dim(0);
  return tape.add(fcn_logits, tape.tile(mlp_logits, 0, k));
}

BoxF decode_box(const Box& ref, const float deltas[4], int img_w, int img_h) {
  for (int i = 0; i < 4; ++i)
    check(std::isfinite(deltas[i]), "decode_box: non-finite deltas");
  const double w = ref.width(), h = ref.height();
  const double cx = ref.x0 + w / 2.0, cy = ref.y0 + h / 2.0;
  auto clamp8 = [](double d) { return std::max(-8.0, std::min(8.0, d)); };
  const double ncx = cx + deltas[0] * w;
  const double ncy = cy + deltas[1] * h;
  const double nw = w * std::exp(clamp8(deltas[2]));
  const double nh = h * std::exp(clamp8(deltas[3]));
  BoxF out{ncx - nw / 2.0, ncy - nh / 2.0, ncx + nw / 2.0 - 1.0, ncy + nh / 2.0 - 1.0};
  out.x0 = std::max(0.0, std::min(out.x0, img_w - 1.0));
  out.y0 = std::max(0.0, std::min(out.y0, img_h - 1.0));
  out.x1 = std::max(out.x0, std::min(out.x1, img_w - 1.0));
  out.y1 = std::max(out.y0, std::min(out.y1, img_h - 1.0));
  return out;
}

void encode_boxf(const Box& ref, const BoxF& gt, float out[4]) {
  const double rw = ref.width(), rh = ref.height();
  const double gw = gt.width(), gh = gt.height();
  const double rcx = ref.x0 + rw / 2.0, rcy = ref.y0 + rh / 2.0;
  const double gcx = gt.x0 + gw / 2.0, gcy = gt.y0 + gh / 2.0;
  out[0] = static_cast<float>((gcx - rcx) / rw);
  out[1] = static_cast<float>((gcy - rcy) / rh);
  out[2] = static_cast<float>(std::log(gw / rw));
  out[3] = static_cast<float>(std::log(gh / rh));
}

void encode_box(const Box& ref, const Box& gt, float out[4]) { encode_boxf(ref, to_boxf(gt), out); }

Box to_pixel_box(const BoxF& b, int img_w, int img_h) {
  Box out;
  out.x0 = std::max(0, std::min(img_w - 1, static_cast<int>(std::lround(b.x0))));
  out.y0 = std::max(0, std::min(img_h - 1, static_cast<int>(std::lround(b.y0))));
  out.x1 = std::max(out.x0, std::min(img_w - 1, static_cast<int>(std::lround(b.x1))));
  out.y1 = std::max(out.y0, std::min(img_h - 1, static_cast<int>(std::lround(b.y1))));
  return out;
}

Bitmask paste_mask(const Tensor& mask_logits, const Box& box, int img_w, int img_h,
                   float threshold) {
  check(mask_logits.ndims() == 2, "paste_mask: logits must be [M,M]");
  const int mh = mask_logits.dim(0), mw = mask_logits.dim(1);
  check(box.x0 >= 0 && box.y0 >= 0 && box.x1 < img_w && box.y1 < img_h && box.width() >= 1 &&
            box.height() >= 1,
        "paste_mask: degenerate box");
  std::vector<double> prob(static_cast<size_t>(mh) * mw);
  for (int i = 0; i < mh; ++i)
    for (int j = 0; j < mw; ++j)
      prob[static_cast<size_t>(i) * mw + j] =
          1.0 / (1.0 + std::exp(-static_cast<double>(mask_logits.at2(i, j))));
  Bitmask out(img_h, img_w);
  const double bw = box.width(), bh = box.height();
  for (int y = box.y0; y <= box.y1; ++y) {
    const double sy = (y - box.y0 + 0.5) * mh / bh;
    for (int x = box.x0; x <= box.x1; ++x) {
      const double sx = (x - box.x0 + 0.5) * mw / bw;
      const BilinearTap tp = bilinear_tap(sy, sx, mh, mw);
      const double v = bilinear_sample(
          tp, [&](int i, int j) { return prob[static_cast<size_t>(i) * mw + j]; });
      if (v > threshold) out.set(y, x, 1);
    }
  }
  return out;
}

Tensor make_mask_target(const Bitmask& gt, const Box& roi, int m) {
  Tensor t({m, m});
  const double bw = roi.width(), bh = roi.height();
  for (int i = 0; i < m; ++i) {
    const double sy = roi.y0 + (i + 0.5) * bh / m;
    for (int j = 0; j < m; ++j) {
      const double sx = roi.x0 + (j + 0.5) * bw / m;
      const BilinearTap tp = bilinear_tap(sy, sx, gt.h, gt.w);
      const double v =
          bilinear_sample(tp, [&](int y, int x) { return static_cast<double>(gt.at(y, x)); });
      t.at2(i, j) = v >= 0.5 ? 1.0f : 0.0f;
    }
  }
  return t;
}

double box_iou(const Box& a, const Box& b) {
  const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const int64_t iw = std::max(0, ix1 - ix0 + 1), ih = std::max(0, iy1 - iy0 + 1);
  const int64_t inter = iw * ih;
  const int64_t uni = static_cast<int64_t>(a.width()) * a.height() +
                      static_cast<int64_t>(b.width()) * b.height() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace maskx
