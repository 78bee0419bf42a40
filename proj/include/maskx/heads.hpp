#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "maskx/shapes.hpp"
#include "maskx/tape.hpp"
#include "maskx/transfer.hpp"

namespace maskx {

/// Continuous box, inclusive endpoints like Box but fractional.
struct BoxF {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0 + 1; }
  double height() const { return y1 - y0 + 1; }
};

inline BoxF to_boxf(const Box& b) {
  return {static_cast<double>(b.x0), static_cast<double>(b.y0), static_cast<double>(b.x1),
          static_cast<double>(b.y1)};
}

struct ConvStage {
  int out_channels;
  int kernel;
  int stride;
};

struct BackboneConfig {
  std::vector<ConvStage> stages = {{16, 3, 2}, {32, 3, 1}, {64, 3, 2}, {64, 3, 1}};

  int total_stride() const {
    int s = 1;
    for (const auto& st : stages) s *= st.stride;
    return s;
  }
  int out_channels() const { return stages.back().out_channels; }
};

struct HeadDims {
  int D = 128;      // box trunk width
  int E = 32;       // mask feature channels
  int M = 14;       // mask output resolution (also the mask RoI crop size)
  int S = 7;        // box head RoI crop size
  int mlp_hidden = 128;
};

enum class HeadMode { Oracle, ClassAgnostic, Transfer };

HeadMode head_mode_from(const std::string& name);
std::string head_mode_name(HeadMode m);

struct ModelConfig {
  int num_classes = kNumCategories;  // C, background excluded
  BackboneConfig backbone;
  HeadDims dims;
  HeadMode head_mode = HeadMode::Transfer;
  bool mlp_fusion = false;
  TransferSpec transfer;
  uint64_t init_seed = 1;
};

struct Param {
  std::string name;
  Tensor value;
  Tensor vel;  // SGD momentum buffer, same shape
};

class ParamStore {
 public:
  int add(const std::string& name, std::vector<int> shape);
  int find(const std::string& name) const;  // -1 when absent
  Param& at(int i) { return items_[static_cast<size_t>(i)]; }
  const Param& at(int i) const { return items_[static_cast<size_t>(i)]; }
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  int size() const { return static_cast<int>(items_.size()); }

 private:
  std::vector<Param> items_;
  std::unordered_map<std::string, int> index_;
};

struct Model {
  ModelConfig cfg;
  ParamStore params;
  Tensor external_embedding;  // loaded once when transfer.source == External
};

/// Creates all parameters for the configured head mode with fan-in normal
/// init (biases zero). Deterministic per (init_seed, param name).
Model build_model(const ModelConfig& cfg);

/// Binds model parameters to tape leaves for one forward/backward pass.
/// `trainable` decides which leaves require grad; null means none.
class TapeModel {
 public:
  TapeModel(Tape& tape, Model& model, std::function<bool(const std::string&)> trainable = nullptr);

  Tape::Id param(const std::string& name);
  Tape& tape() { return tape_; }
  Model& model() { return model_; }

  /// (param index, leaf id) for every parameter touched by this tape.
  const std::vector<std::pair<int, Tape::Id>>& touched() const { return touched_; }

 private:
  Tape& tape_;
  Model& model_;
  std::function<bool(const std::string&)> trainable_;
  std::vector<Tape::Id> leaf_of_;
  std::vector<std::pair<int, Tape::Id>> touched_;
};

/// image tensor [3,H,W] (values already centered) -> feature map id.
Tape::Id backbone_forward(TapeModel& tm, const Tensor& image_chw);

/// Converts image tensor from a scene record: [3,H,W], values in [0,1]
/// shifted to [-0.5, 0.5].
Tensor image_tensor(const SceneRecord& rec);

/// RoIAlign-style crop: pixel box scaled by 1/stride, clamped, sampled
/// bilinearly at out x out bin centers. Errors on sub-pixel feature boxes.
Tape::Id crop_resize(Tape& tape, Tape::Id features, const BoxF& box_pixels, int out_size,
                     int stride);

struct BoxHeadOut {
  Tape::Id logits;  // [N, C+1]
  Tape::Id deltas;  // [N, 4C]
};

/// roi_rows: [N, Cf*S*S] flattened crops.
BoxHeadOut box_head_forward(TapeModel& tm, Tape::Id roi_rows);

/// Per-class w_seg rows [K, E+1] according to the head mode: learned
/// directly (oracle), one shared row tiled K times (class-agnostic), or
/// predicted by the transfer function.
Tape::Id wseg_rows(TapeModel& tm);

/// RoI feature [Cf,M,M] -> mask trunk features [E,M,M].
Tape::Id mask_fcn_forward(TapeModel& tm, Tape::Id roi_feature);

/// Per-class 1x1 prediction: [K,M,M] logits from trunk features and w_seg.
Tape::Id mask_logits_from_wseg(Tape& tape, Tape::Id fcn_features, Tape::Id wseg);

/// Head-mode dispatch for the per-RoI mask logits. Oracle/transfer apply
/// the (hoisted) w_seg rows; class-agnostic predicts its single channel and
/// tiles it K times, which makes the channel identity exact.
Tape::Id mask_class_logits(TapeModel& tm, Tape::Id fcn_features, Tape::Id wseg);

/// Class-agnostic MLP branch: RoI feature -> [1,M,M] logits.
Tape::Id mlp_mask_logits(TapeModel& tm, Tape::Id roi_feature);

/// fused = fcn + tile(mlp, K) on the class axis.
Tape::Id fuse_mask_logits(Tape& tape, Tape::Id fcn_logits, Tape::Id mlp_logits);

/// center' = center + delta*size; size' = size*exp(d); clipped to image.
BoxF decode_box(const Box& ref, const float deltas[4], int img_w, int img_h);

/// Inverse of decode_box for building regression targets.
void encode_box(const Box& ref, const Box& gt, float out[4]);
void encode_boxf(const Box& ref, const BoxF& gt, float out[4]);

Box to_pixel_box(const BoxF& b, int img_w, int img_h);

/// sigmoid -> bilinear resize to the box extent -> threshold -> paste.
/// mask_logits: [M,M] single-channel tensor.
Bitmask paste_mask(const Tensor& mask_logits, const Box& box, int img_w, int img_h,
                   float threshold = 0.5f);

/// Bilinear crop of a ground-truth bitmask to an RoI, resized to MxM and
/// binarized at 0.5; the mask-loss target.
Tensor make_mask_target(const Bitmask& gt, const Box& roi, int m);

/// Detection produced by the ground-truth-RoI inference path.
struct Detection {
  int image_id = 0;
  Box box;
  int category = 0;  // network class in 1..C (0 is background and never emitted)
  double score = 0;
  Bitmask mask;  // full resolution, zero outside box
};

double box_iou(const Box& a, const Box& b);

}  // namespace maskx
