#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "maskx/dataset.hpp"
#include "maskx/heads.hpp"

namespace maskx {

/// |a&b| / |a|b|; 0 when both masks are empty.
double mask_iou(const Bitmask& a, const Bitmask& b);

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
const std::array<double, 10>& iou_thresholds();

/// AP of one pooled group: predictions sorted by score (ties keep list
/// order), greedily matched to the unmatched GT with highest IoU >= thr
/// (IoU ties take the lower GT index), 101-point interpolated. Returns NaN
/// when there is no GT (undefined, excluded from means).
double ap_single(const std::vector<std::pair<double, Bitmask>>& preds,
                 const std::vector<Bitmask>& gts, double iou_threshold);

struct EvalReport {
  int num_categories = 0;
  std::vector<std::array<double, 10>> ap_thr;  // per category, per threshold
  std::vector<double> ap;                      // per category, mean over thresholds
  double ap_a = 0, ap_b = 0;                   // NaN when a set has no evaluable class
  std::array<double, 10> ap_a_thr{}, ap_b_thr{};  // set means per threshold
  int64_t images = 0;
  int64_t gt_instances = 0;
  int64_t predictions = 0;
  std::vector<int64_t> gt_per_category;
};

/// Mask AP over the 10 thresholds, per category; matching runs per image,
/// precision/recall pools across images. Set means skip categories with
/// zero GT instances.
EvalReport coco_map(const std::vector<Detection>& detections, const Dataset& gt,
                    const SplitConfig& split);

struct EvalOptions {
  uint64_t jitter_seed = 99;
  float jitter = 0.1f;
};

/// Ground-truth-RoI inference: every GT box is jittered, classified, box-
/// refined and masked; background argmax drops the detection.
std::vector<Detection> run_inference(Model& model, const Dataset& ds, const EvalOptions& opt);

struct RunRecord {
  std::string label;
  int trial = 0;
  EvalReport report;
  uint64_t split_hash = 0;
  uint64_t dataset_hash = 0;
};

struct AblationRow {
  std::string label;
  uint64_t split_hash = 0;
  double mean_ap_a = 0;
  double mean_ap_b = 0;
  double rel_change_b = 0;  // vs baseline row, (x - base) / base
  int trials = 0;
  double std_ap_b = 0;  // sample std over trials; 0 when trials == 1
  bool has_std = false;
  double ap50_b = 0, ap75_b = 0;  // filled when breakout is requested
};

/// Aggregates runs by label (trials collapse into mean/std) and computes
/// the relative AP_B change against the baseline label. Rows for random
/// split sweeps carry an "|a<size>" suffix and resolve their baseline at
/// the same suffix. All runs must share the dataset hash.
std::vector<AblationRow> ablation_report(const std::vector<RunRecord>& runs,
                                         const std::string& baseline_label,
                                         bool ap_breakout = false);

void write_report_csv(const std::string& path, const std::vector<AblationRow>& rows,
                      bool ap_breakout = false);
void write_per_class_csv(const std::string& path, const std::vector<RunRecord>& runs);

}  // namespace maskx
