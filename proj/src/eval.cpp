#include "maskx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace maskx {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

double mask_iou(const Bitmask& a, const Bitmask& b) {
  check(a.h == b.h && a.w == b.w, "mask_iou: dimension mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    inter += (a.px[i] & b.px[i]);
    uni += (a.px[i] | b.px[i]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

const std::array<double, 10>& iou_thresholds() {
  static const std::array<double, 10> thr = [] {
    std::array<double, 10> t{};
    for (int i = 0; i < 10; ++i) t[static_cast<size_t>(i)] = (50 + 5 * i) / 100.0;
    return t;
  }();
  return thr;
}

namespace {

/// Greedy matching of one group: preds visited by score descending (ties
/// keep insertion order), each taking the unmatched GT with highest
/// IoU >= thr, IoU ties resolved to the lower GT index. Returns
/// (score, is_tp) in visit order.
std::vector<std::pair<double, char>> greedy_match(
    const std::vector<std::pair<double, const Bitmask*>>& preds,
    const std::vector<const Bitmask*>& gts, double thr) {
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return preds[a].first > preds[b].first; });
  std::vector<char> taken(gts.size(), 0);
  std::vector<std::pair<double, char>> out;
  out.reserve(preds.size());
  for (size_t oi : order) {
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double iou = mask_iou(*preds[oi].second, *gts[g]);
      if (iou >= thr && iou > best_iou) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) taken[static_cast<size_t>(best)] = 1;
    out.emplace_back(preds[oi].first, best >= 0 ? 1 : 0);
  }
  return out;
}

/// 101-point interpolated AP from pooled (score, is_tp) pairs.
double ap_101(std::vector<std::pair<double, char>> scored, int64_t n_gt) {
  if (n_gt == 0) return kNaN;
  if (scored.empty()) return 0.0;
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  const size_t n = scored.size();
  std::vector<double> precision(n), recall(n);
  int64_t tp = 0;
  for (size_t k = 0; k < n; ++k) {
    tp += scored[k].second;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  // interpolated precision: running max from the high-recall end
  std::vector<double> interp(n);
  double run = 0;
  for (size_t k = n; k-- > 0;) {
    run = std::max(run, precision[k]);
    interp[k] = run;
  }
  double total = 0;
  size_t k = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    while (k < n && recall[k] < r) ++k;
    if (k < n) total += interp[k];
  }
  return total / 101.0;
}

}  // namespace

double ap_single(const std::vector<std::pair<double, Bitmask>>& preds,
                 const std::vector<Bitmask>& gts, double iou_threshold) {
  std::vector<std::pair<double, const Bitmask*>> p;
  p.reserve(preds.size());
  for (const auto& [s, m] : preds) p.emplace_back(s, &m);
  std::vector<const Bitmask*> g;
  g.reserve(gts.size());
  for (const auto& m : gts) g.push_back(&m);
  return ap_101(greedy_match(p, g, iou_threshold), static_cast<int64_t>(gts.size()));
}

EvalReport coco_map(const std::vector<Detection>& detections, const Dataset& gt,
                    const SplitConfig& split) {
  const int C = static_cast<int>(split.a.size() + split.b.size());
  for (const Detection& d : detections)
    check(d.category >= 1 && d.category <= C, "coco_map: unknown class id");

  EvalReport rep;
  rep.num_categories = C;
  rep.images = static_cast<int64_t>(gt.records.size());
  rep.predictions = static_cast<int64_t>(detections.size());
  rep.gt_per_category.assign(static_cast<size_t>(C), 0);
  rep.ap_thr.assign(static_cast<size_t>(C), {});
  rep.ap.assign(static_cast<size_t>(C), kNaN);

  // group GT and predictions per (category, image)
  const size_t n_img = gt.records.size();
  std::vector<std::vector<std::vector<const Bitmask*>>> gt_masks(
      static_cast<size_t>(C), std::vector<std::vector<const Bitmask*>>(n_img));
  for (size_t i = 0; i < n_img; ++i) {
    for (const Instance& inst : gt.records[i].instances) {
      gt_masks[static_cast<size_t>(inst.category)][i].push_back(&inst.mask);
      ++rep.gt_per_category[static_cast<size_t>(inst.category)];
      ++rep.gt_instances;
    }
  }
  std::vector<std::vector<std::vector<std::pair<double, const Bitmask*>>>> pred(
      static_cast<size_t>(C), std::vector<std::vector<std::pair<double, const Bitmask*>>>(n_img));
  for (const Detection& d : detections) {
    check(d.image_id >= 0 && static_cast<size_t>(d.image_id) < n_img,
          "coco_map: detection references unknown image");
    pred[static_cast<size_t>(d.category - 1)][static_cast<size_t>(d.image_id)].emplace_back(
        d.score, &d.mask);
  }

  for (int c = 0; c < C; ++c) {
    const int64_t n_gt = rep.gt_per_category[static_cast<size_t>(c)];
    for (size_t ti = 0; ti < iou_thresholds().size(); ++ti) {
      if (n_gt == 0) {
        rep.ap_thr[static_cast<size_t>(c)][ti] = kNaN;
        continue;
      }
      const double thr = iou_thresholds()[ti];
      std::vector<std::pair<double, char>> pooled;
      for (size_t i = 0; i < n_img; ++i) {
        const auto matched =
            greedy_match(pred[static_cast<size_t>(c)][i], gt_masks[static_cast<size_t>(c)][i], thr);
        pooled.insert(pooled.end(), matched.begin(), matched.end());
      }
      rep.ap_thr[static_cast<size_t>(c)][ti] = ap_101(std::move(pooled), n_gt);
    }
    if (n_gt > 0) {
      double s = 0;
      for (double v : rep.ap_thr[static_cast<size_t>(c)]) s += v;
      rep.ap[static_cast<size_t>(c)] = s / 10.0;
    }
  }

  auto set_mean = [&](const std::vector<int>& ids) {
    double s = 0;
    int n = 0;
    for (int c : ids) {
      if (rep.gt_per_category[static_cast<size_t>(c)] == 0) continue;
      s += rep.ap[static_cast<size_t>(c)];
      ++n;
    }
    return n == 0 ? kNaN : s / n;
  };
  auto set_mean_thr = [&](const std::vector<int>& ids, size_t ti) {
    double s = 0;
    int n = 0;
    for (int c : ids) {
      if (rep.gt_per_category[static_cast<size_t>(c)] == 0) continue;
      s += rep.ap_thr[static_cast<size_t>(c)][ti];
      ++n;
    }
    return n == 0 ? kNaN : s / n;
  };
  rep.ap_a = set_mean(split.a);
  rep.ap_b = set_mean(split.b);
  for (size_t ti = 0; ti < 10; ++ti) {
    rep.ap_a_thr[ti] = set_mean_thr(split.a, ti);
    rep.ap_b_thr[ti] = set_mean_thr(split.b, ti);
  }
  return rep;
}

std::vector<Detection> run_inference(Model& model, const Dataset& ds, const EvalOptions& opt) {
  const ModelConfig& cfg = model.cfg;
  const int C = cfg.num_classes;
  const int stride = cfg.backbone.total_stride();
  const HeadDims& dims = cfg.dims;

  // w_seg rows are constant during inference; compute them once
  const bool agnostic = cfg.head_mode == HeadMode::ClassAgnostic;
  Tensor wseg_const;
  if (!agnostic) {
    Tape t0;
    TapeModel tm0(t0, model);
    wseg_const = t0.value(wseg_rows(tm0));
  }

  std::vector<Detection> dets;
  for (const SceneRecord& rec : ds.records) {
    if (rec.instances.empty()) continue;
    Tape tape;
    TapeModel tm(tape, model);
    const Tape::Id feats = backbone_forward(tm, image_tensor(rec));
    const Tape::Id wseg = agnostic ? Tape::kNone : tape.leaf(wseg_const, false);

    std::vector<Box> rois;
    for (size_t k = 0; k < rec.instances.size(); ++k) {
      Rng rng(mix_seed(mix_seed(opt.jitter_seed, static_cast<uint64_t>(rec.id)),
                       static_cast<uint64_t>(k)));
      const Box& gt = rec.instances[k].box;
      const double w = gt.width(), h = gt.height();
      const double cx = gt.x0 + w / 2.0 + rng.uniform(-opt.jitter, opt.jitter) * w;
      const double cy = gt.y0 + h / 2.0 + rng.uniform(-opt.jitter, opt.jitter) * h;
      const double nw = w * (1.0 + rng.uniform(-opt.jitter, opt.jitter));
      const double nh = h * (1.0 + rng.uniform(-opt.jitter, opt.jitter));
      rois.push_back(to_pixel_box(
          {cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0 - 1.0, cy + nh / 2.0 - 1.0}, rec.w, rec.h));
    }

    std::vector<Tape::Id> rows;
    for (const Box& roi : rois)
      rows.push_back(tape.flatten(crop_resize(tape, feats, to_boxf(roi), dims.S, stride)));
    const BoxHeadOut bh =
        box_head_forward(tm, rows.size() == 1 ? rows[0] : tape.concat(rows, 0));
    // copies: later mask-head ops grow the tape and invalidate references
    const Tensor logits = tape.value(bh.logits);
    const Tensor deltas = tape.value(bh.deltas);

    for (size_t k = 0; k < rois.size(); ++k) {
      // softmax over C+1 classes
      double mx = logits.at2(static_cast<int>(k), 0);
      for (int j = 1; j <= C; ++j) mx = std::max(mx, static_cast<double>(logits.at2(static_cast<int>(k), j)));
      double se = 0;
      std::vector<double> p(static_cast<size_t>(C + 1));
      for (int j = 0; j <= C; ++j) {
        p[static_cast<size_t>(j)] = std::exp(static_cast<double>(logits.at2(static_cast<int>(k), j)) - mx);
        se += p[static_cast<size_t>(j)];
      }
      int best = 0;
      for (int j = 1; j <= C; ++j)
        if (p[static_cast<size_t>(j)] > p[static_cast<size_t>(best)]) best = j;
      if (best == 0) continue;  // background

      float d4[4];
      for (int j = 0; j < 4; ++j) d4[j] = deltas.at2(static_cast<int>(k), 4 * (best - 1) + j);
      const BoxF refined = decode_box(rois[k], d4, rec.w, rec.h);
      Box pix = to_pixel_box(refined, rec.w, rec.h);
      // keep at least one feature pixel under the mask crop
      if (pix.width() < stride) pix.x1 = std::min(rec.w - 1, pix.x0 + stride - 1);
      if (pix.height() < stride) pix.y1 = std::min(rec.h - 1, pix.y0 + stride - 1);
      if (pix.width() < stride) pix.x0 = std::max(0, pix.x1 - stride + 1);
      if (pix.height() < stride) pix.y0 = std::max(0, pix.y1 - stride + 1);

      const Tape::Id crop = crop_resize(tape, feats, to_boxf(pix), dims.M, stride);
      Tape::Id mlogits = mask_class_logits(tm, mask_fcn_forward(tm, crop), wseg);
      if (cfg.mlp_fusion) mlogits = fuse_mask_logits(tape, mlogits, mlp_mask_logits(tm, crop));
      const Tensor& mval = tape.value(mlogits);
      Tensor channel({dims.M, dims.M});
      for (int i = 0; i < dims.M; ++i)
        for (int j = 0; j < dims.M; ++j) channel.at2(i, j) = mval.at3(best - 1, i, j);

      Detection det;
      det.image_id = rec.id;
      det.box = pix;
      det.category = best;
      det.score = p[static_cast<size_t>(best)] / se;
      det.mask = paste_mask(channel, pix, rec.w, rec.h);
      dets.push_back(std::move(det));
    }
  }
  return dets;
}

namespace {

std::string fmt6(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string hex16(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::vector<AblationRow> ablation_report(const std::vector<RunRecord>& runs,
                                         const std::string& baseline_label, bool ap_breakout) {
  check(!runs.empty(), "ablation_report: no runs");
  for (const RunRecord& r : runs)
    check(r.dataset_hash == runs[0].dataset_hash, "ablation_report: mismatched dataset hashes");

  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const RunRecord& r : runs) {
    if (groups.find(r.label) == groups.end()) order.push_back(r.label);
    groups[r.label].push_back(&r);
  }

  std::map<std::string, AblationRow> rows;
  for (const std::string& label : order) {
    const auto& g = groups[label];
    AblationRow row;
    row.label = label;
    row.trials = static_cast<int>(g.size());
    double sa = 0, sb = 0, s50 = 0, s75 = 0;
    for (const RunRecord* r : g) {
      sa += r->report.ap_a;
      sb += r->report.ap_b;
      s50 += r->report.ap_b_thr[0];  // 0.50
      s75 += r->report.ap_b_thr[5];  // 0.75
    }
    row.mean_ap_a = sa / row.trials;
    row.mean_ap_b = sb / row.trials;
    if (ap_breakout) {
      row.ap50_b = s50 / row.trials;
      row.ap75_b = s75 / row.trials;
    }
    if (row.trials > 1) {
      double var = 0;
      for (const RunRecord* r : g) {
        const double d = r->report.ap_b - row.mean_ap_b;
        var += d * d;
      }
      row.std_ap_b = std::sqrt(var / (row.trials - 1));
      row.has_std = true;
    }
    uint64_t sh = g[0]->split_hash;
    for (const RunRecord* r : g)
      if (r->split_hash != sh) sh = fnv1a64(&r->split_hash, sizeof(uint64_t), sh);
    row.split_hash = sh;
    rows[label] = row;
  }

  // baseline lookup; random-split rows match the baseline at their size suffix
  auto baseline_for = [&](const std::string& label) -> const AblationRow& {
    std::string cand = baseline_label;
    if (rows.find(cand) == rows.end()) {
      const size_t pos = label.rfind("|a");
      if (pos != std::string::npos) cand = baseline_label + label.substr(pos);
    }
    auto it = rows.find(cand);
    check(it != rows.end(), "ablation_report: baseline label missing: " + cand);
    return it->second;
  };

  std::vector<AblationRow> out;
  for (const std::string& label : order) {
    AblationRow row = rows[label];
    const AblationRow& base = baseline_for(label);
    check(base.split_hash == row.split_hash,
          "ablation_report: baseline split does not match row " + label);
    row.rel_change_b = base.mean_ap_b == 0
                           ? kNaN
                           : (row.mean_ap_b - base.mean_ap_b) / base.mean_ap_b;
    out.push_back(std::move(row));
  }
  return out;
}

void write_report_csv(const std::string& path, const std::vector<AblationRow>& rows,
                      bool ap_breakout) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write report " + path);
  f << "label,split_hash,AP_A,AP_B,rel_change_B,trials,std_AP_B";
  if (ap_breakout) f << ",AP50_B,AP75_B";
  f << "\n";
  for (const AblationRow& r : rows) {
    f << r.label << ',' << hex16(r.split_hash) << ',' << fmt6(r.mean_ap_a) << ','
      << fmt6(r.mean_ap_b) << ',' << fmt6(r.rel_change_b) << ',' << r.trials << ','
      << (r.has_std ? fmt6(r.std_ap_b) : "");
    if (ap_breakout) f << ',' << fmt6(r.ap50_b) << ',' << fmt6(r.ap75_b);
    f << "\n";
  }
}

void write_per_class_csv(const std::string& path, const std::vector<RunRecord>& runs) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot write per-class report " + path);
  f << "label,class_id,AP\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const RunRecord& r : runs) {
    if (groups.find(r.label) == groups.end()) order.push_back(r.label);
    groups[r.label].push_back(&r);
  }
  for (const std::string& label : order) {
    const auto& g = groups[label];
    const int C = g[0]->report.num_categories;
    for (int c = 0; c < C; ++c) {
      double s = 0;
      int n = 0;
      for (const RunRecord* r : g) {
        if (std::isnan(r->report.ap[static_cast<size_t>(c)])) continue;
        s += r->report.ap[static_cast<size_t>(c)];
        ++n;
      }
      f << label << ',' << c << ',' << (n ? fmt6(s / n) : "") << "\n";
    }
  }
}

}  // namespace maskx
