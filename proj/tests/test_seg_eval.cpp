#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maskx/eval.hpp"

using namespace maskx;

namespace {

Bitmask rect_mask(int h, int w, int y0, int x0, int y1, int x1) {
  Bitmask m(h, w);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m.set(y, x, 1);
  return m;
}

/// Brute-force AP oracle: simulates the greedy matching rule literally and
/// evaluates the 101-point interpolation by direct definition (max
/// precision over every prefix with recall >= r), independent of the
/// library's cumulative sweep.
double ap_oracle(const std::vector<std::pair<double, Bitmask>>& preds,
                 const std::vector<Bitmask>& gts, double thr) {
  if (gts.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return preds[a].first > preds[b].first; });
  std::vector<bool> used(gts.size(), false);
  std::vector<int> tp_flags;
  for (size_t oi : order) {
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = mask_iou(preds[oi].second, gts[g]);
      if (iou >= thr && iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) used[static_cast<size_t>(best)] = true;
    tp_flags.push_back(best >= 0 ? 1 : 0);
  }
  double total = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    double best_prec = 0;
    int tp = 0;
    for (size_t k = 0; k < tp_flags.size(); ++k) {
      tp += tp_flags[k];
      const double recall = static_cast<double>(tp) / static_cast<double>(gts.size());
      const double prec = static_cast<double>(tp) / static_cast<double>(k + 1);
      if (recall >= r) best_prec = std::max(best_prec, prec);
    }
    total += best_prec;
  }
  return total / 101.0;
}

}  // namespace

TEST_CASE("mask_iou") {
  const Bitmask a = rect_mask(8, 8, 0, 0, 3, 3);
  SUBCASE("identical non-empty masks give 1") { CHECK(mask_iou(a, a) == 1.0); }
  SUBCASE("disjoint masks give 0") {
    const Bitmask b = rect_mask(8, 8, 4, 4, 7, 7);
    CHECK(mask_iou(a, b) == 0.0);
  }
  SUBCASE("two 4x4 squares overlapping in a 4x2 strip: 8/24") {
    const Bitmask p = rect_mask(8, 8, 0, 0, 3, 3);
    const Bitmask q = rect_mask(8, 8, 0, 2, 3, 5);
    CHECK(mask_iou(p, q) == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("symmetry and the empty-empty convention") {
    const Bitmask b = rect_mask(8, 8, 2, 2, 5, 6);
    CHECK(mask_iou(a, b) == mask_iou(b, a));
    const Bitmask e1(8, 8), e2(8, 8);
    CHECK(mask_iou(e1, e2) == 0.0);
  }
  SUBCASE("dimension mismatch is an error") {
    const Bitmask b(4, 4);
    CHECK_THROWS_AS(mask_iou(a, b), Error);
  }
}

TEST_CASE("iou_thresholds: exactly ten values from 0.5 to 0.95") {
  const auto& t = iou_thresholds();
  CHECK(t.size() == 10);
  CHECK(t.front() == 0.5);
  CHECK(t.back() == 0.95);
  for (size_t i = 1; i < t.size(); ++i) CHECK(t[i] - t[i - 1] == doctest::Approx(0.05));
}

TEST_CASE("ap_single hand cases") {
  const Bitmask g1 = rect_mask(16, 16, 0, 0, 5, 5);
  const Bitmask g2 = rect_mask(16, 16, 8, 8, 13, 13);

  SUBCASE("perfect predictions give AP 1") {
    std::vector<std::pair<double, Bitmask>> preds = {{0.9, g1}, {0.8, g2}};
    CHECK(ap_single(preds, {g1, g2}, 0.5) == doctest::Approx(1.0));
  }
  SUBCASE("no predictions, some GT: AP 0") {
    CHECK(ap_single({}, {g1}, 0.5) == doctest::Approx(0.0));
  }
  SUBCASE("no GT: undefined (NaN)") {
    std::vector<std::pair<double, Bitmask>> preds = {{0.9, g1}};
    CHECK(std::isnan(ap_single(preds, {}, 0.5)));
  }
  SUBCASE("frozen oracle case: TP(.9) + FP(.8) over 2 GT = 51/101") {
    const Bitmask fp = rect_mask(16, 16, 0, 8, 5, 13);  // overlaps neither GT
    std::vector<std::pair<double, Bitmask>> preds = {{0.9, g1}, {0.8, fp}};
    const double expect = 51.0 / 101.0;
    CHECK(ap_single(preds, {g1, g2}, 0.5) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(ap_oracle(preds, {g1, g2}, 0.5) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("ap_single equals the brute-force oracle on random micro-instances") {
  Rng rng(31);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n_gt = rng.uniform_int(1, 4);
    const int n_pred = rng.uniform_int(0, 6);
    std::vector<Bitmask> gts;
    for (int g = 0; g < n_gt; ++g) {
      const int y = rng.uniform_int(0, 9), x = rng.uniform_int(0, 9);
      const int hh = rng.uniform_int(2, 6), ww = rng.uniform_int(2, 6);
      gts.push_back(rect_mask(16, 16, y, x, std::min(15, y + hh), std::min(15, x + ww)));
    }
    std::vector<std::pair<double, Bitmask>> preds;
    for (int p = 0; p < n_pred; ++p) {
      const int y = rng.uniform_int(0, 9), x = rng.uniform_int(0, 9);
      const int hh = rng.uniform_int(2, 6), ww = rng.uniform_int(2, 6);
      // quantized scores so ties actually occur
      const double score = rng.uniform_int(1, 5) / 5.0;
      preds.emplace_back(score, rect_mask(16, 16, y, x, std::min(15, y + hh), std::min(15, x + ww)));
    }
    for (double thr : {0.5, 0.75}) {
      const double got = ap_single(preds, gts, thr);
      const double want = ap_oracle(preds, gts, thr);
      CHECK(std::abs(got - want) < 1e-9);
      ++checked;
    }
  }
  CHECK(checked == 600);
}

TEST_CASE("AP properties") {
  Rng rng(17);
  auto random_case = [&](std::vector<std::pair<double, Bitmask>>& preds, std::vector<Bitmask>& gts) {
    const int n_gt = rng.uniform_int(1, 4);
    for (int g = 0; g < n_gt; ++g) {
      const int y = rng.uniform_int(0, 8), x = rng.uniform_int(0, 8);
      gts.push_back(rect_mask(16, 16, y, x, y + rng.uniform_int(2, 6), x + rng.uniform_int(2, 6)));
    }
    const int n_pred = rng.uniform_int(1, 6);
    for (int p = 0; p < n_pred; ++p) {
      const int y = rng.uniform_int(0, 8), x = rng.uniform_int(0, 8);
      preds.emplace_back(rng.uniform(0.1, 0.9),
                         rect_mask(16, 16, y, x, y + rng.uniform_int(2, 6), x + rng.uniform_int(2, 6)));
    }
  };

  SUBCASE("invariant under strictly monotone score transforms") {
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<std::pair<double, Bitmask>> preds;
      std::vector<Bitmask> gts;
      random_case(preds, gts);
      const double before = ap_single(preds, gts, 0.5);
      auto mapped = preds;
      for (auto& [s, m] : mapped) s = std::exp(3 * s) + 1;  // strictly increasing
      CHECK(ap_single(mapped, gts, 0.5) == doctest::Approx(before).epsilon(1e-12));
    }
  }
  SUBCASE("adding a top-scored true positive never decreases AP") {
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<std::pair<double, Bitmask>> preds;
      std::vector<Bitmask> gts;
      random_case(preds, gts);
      gts.push_back(rect_mask(16, 16, 10, 10, 14, 14));
      const double before = ap_single(preds, gts, 0.5);
      auto more = preds;
      more.emplace_back(10.0, gts.back());  // exact-match TP above all scores
      CHECK(ap_single(more, gts, 0.5) >= before - 1e-12);
    }
  }
}

TEST_CASE("coco_map aggregates per class and per set") {
  // synthetic 2-image dataset with known masks; categories 0 and 7
  Dataset ds;
  ds.canvas_h = ds.canvas_w = 16;
  for (int i = 0; i < 2; ++i) {
    SceneRecord rec;
    rec.id = i;
    rec.h = rec.w = 16;
    rec.image.assign(16 * 16 * 3, 0);
    Instance a;
    a.category = 0;
    a.mask = rect_mask(16, 16, 1, 1, 6, 6);
    a.box = derive_bbox(a.mask);
    Instance b;
    b.category = 7;
    b.mask = rect_mask(16, 16, 9, 9, 14, 14);
    b.box = derive_bbox(b.mask);
    rec.instances = {a, b};
    ds.records.push_back(std::move(rec));
  }
  const SplitConfig split = split_classes(10, 5, false, 0);

  SUBCASE("perfect predictor scores 1.0 on both sets") {
    std::vector<Detection> dets;
    for (int i = 0; i < 2; ++i) {
      for (const Instance& inst : ds.records[static_cast<size_t>(i)].instances) {
        Detection d;
        d.image_id = i;
        d.category = inst.category + 1;
        d.score = 0.9;
        d.box = inst.box;
        d.mask = inst.mask;
        dets.push_back(std::move(d));
      }
    }
    const EvalReport rep = coco_map(dets, ds, split);
    CHECK(rep.ap_a == doctest::Approx(1.0));
    CHECK(rep.ap_b == doctest::Approx(1.0));
    CHECK(rep.gt_instances == 4);
    CHECK(rep.predictions == 4);
    // set mean equals the arithmetic mean of member class APs
    double sa = 0;
    int na = 0;
    for (int c : split.a) {
      if (rep.gt_per_category[static_cast<size_t>(c)] == 0) continue;
      sa += rep.ap[static_cast<size_t>(c)];
      ++na;
    }
    CHECK(rep.ap_a == doctest::Approx(sa / na));
  }

  SUBCASE("restricted to one class and one threshold it equals ap_single") {
    std::vector<Detection> dets;
    Detection d;
    d.image_id = 0;
    d.category = 1;
    d.score = 0.7;
    d.box = {1, 1, 6, 6};
    d.mask = rect_mask(16, 16, 1, 1, 5, 6);  // imperfect overlap
    dets.push_back(d);
    const EvalReport rep = coco_map(dets, ds, split);
    // class 0 pooled over both images: image 0 has the prediction, image 1 none
    std::vector<std::pair<double, Bitmask>> preds = {{0.7, dets[0].mask}};
    // pooled AP with 2 GT total equals ap over the pool
    const double iou = mask_iou(dets[0].mask, ds.records[0].instances[0].mask);
    const double want_thr = iou >= 0.5 ? 51.0 / 101.0 : 0.0;  // 1 TP of 2 GT
    CHECK(rep.ap_thr[0][0] == doctest::Approx(want_thr).epsilon(1e-12));
  }

  SUBCASE("classes without GT are excluded from set means") {
    std::vector<Detection> dets;  // no predictions at all
    const EvalReport rep = coco_map(dets, ds, split);
    CHECK(rep.ap[0] == doctest::Approx(0.0));
    CHECK(std::isnan(rep.ap[1]));        // no GT for class 1
    CHECK(rep.ap_a == doctest::Approx(0.0));  // mean over {class 0} only
  }

  SUBCASE("unknown class id is an error") {
    Detection d;
    d.image_id = 0;
    d.category = 11;
    d.score = 0.5;
    d.mask = rect_mask(16, 16, 0, 0, 3, 3);
    CHECK_THROWS_AS(coco_map({d}, ds, split), Error);
  }
}

TEST_CASE("ablation_report") {
  auto make_report = [](double apa, double apb) {
    EvalReport r;
    r.num_categories = 10;
    r.ap.assign(10, apb);
    r.ap_thr.assign(10, {});
    r.gt_per_category.assign(10, 1);
    r.ap_a = apa;
    r.ap_b = apb;
    for (size_t t = 0; t < 10; ++t) {
      r.ap_a_thr[t] = apa;
      r.ap_b_thr[t] = apb;
    }
    return r;
  };
  const uint64_t sh = 42, dh = 77;

  SUBCASE("relative change and multi-trial aggregation") {
    std::vector<RunRecord> runs;
    runs.push_back({"baseline", 0, make_report(0.5, 0.16), sh, dh});
    runs.push_back({"baseline", 1, make_report(0.5, 0.16), sh, dh});
    runs.push_back({"ours", 0, make_report(0.5, 0.18), sh, dh});
    runs.push_back({"ours", 1, make_report(0.5, 0.22), sh, dh});
    const auto rows = ablation_report(runs, "baseline");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].label == "baseline");
    CHECK(rows[0].rel_change_b == doctest::Approx(0.0));
    CHECK(rows[1].mean_ap_b == doctest::Approx(0.20));
    CHECK(rows[1].rel_change_b == doctest::Approx(0.25));  // 0.20 vs 0.16 -> +25%
    CHECK(rows[1].trials == 2);
    CHECK(rows[1].std_ap_b == doctest::Approx(std::sqrt(2 * 0.02 * 0.02 / 1.0)));
  }
  SUBCASE("missing baseline row errors") {
    std::vector<RunRecord> runs = {{"ours", 0, make_report(0.5, 0.2), sh, dh}};
    CHECK_THROWS_AS(ablation_report(runs, "baseline"), Error);
  }
  SUBCASE("mismatched dataset hashes error") {
    std::vector<RunRecord> runs = {{"baseline", 0, make_report(0.5, 0.2), sh, dh},
                                   {"ours", 0, make_report(0.5, 0.2), sh, dh + 1}};
    CHECK_THROWS_AS(ablation_report(runs, "baseline"), Error);
  }
  SUBCASE("random-split rows find their per-size baseline") {
    std::vector<RunRecord> runs;
    runs.push_back({"base|a4", 0, make_report(0.5, 0.10), 1, dh});
    runs.push_back({"ours|a4", 0, make_report(0.5, 0.15), 1, dh});
    runs.push_back({"base|a6", 0, make_report(0.5, 0.20), 2, dh});
    runs.push_back({"ours|a6", 0, make_report(0.5, 0.30), 2, dh});
    const auto rows = ablation_report(runs, "base");
    REQUIRE(rows.size() == 4);
    CHECK(rows[1].rel_change_b == doctest::Approx(0.5));
    CHECK(rows[3].rel_change_b == doctest::Approx(0.5));
  }
}
