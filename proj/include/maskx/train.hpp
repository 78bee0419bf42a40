#pragma once

#include <functional>
#include <string>
#include <vector>

#include "maskx/dataset.hpp"
#include "maskx/heads.hpp"
#include "maskx/optim.hpp"

namespace maskx {

struct TrainConfig {
  enum class Mode { Stagewise, E2e };
  Mode mode = Mode::E2e;
  int steps = 1000;  // per stage for stagewise, total for e2e
  float lr = 0.02f;
  std::vector<int> decay_steps = {600, 800};
  float decay_factor = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  int images_per_step = 2;
  int rois_per_image = 8;
  float jitter = 0.1f;
  uint64_t seed = 1;
  bool full_k_mask = false;  // experimental: supervise all K channels on A-class RoIs

  void validate() const;
};

TrainConfig::Mode train_mode_from(const std::string& name);
std::string train_mode_name(TrainConfig::Mode m);

/// Piecewise-constant schedule: lr * factor^(number of decay steps <= step).
float lr_at(const TrainConfig& cfg, int step);

struct RoiSample {
  int image_slot = 0;      // index into StepBatch::image_ids
  Box roi;                 // jittered GT box, or a background box
  int label = 0;           // 0 background, else category+1
  int instance_index = 0;  // valid for foreground only
};

struct StepBatch {
  std::vector<int> image_ids;
  std::vector<RoiSample> rois;
};

/// Counter-based batch sampling: depends only on (cfg.seed, step), so a
/// resumed run replays the exact stream. Every image contributes its GT
/// boxes (jittered) plus an equal number of background boxes.
StepBatch sample_batch(const Dataset& ds, const TrainConfig& cfg, int step);

struct LossEnable {
  bool cls = true;
  bool box = true;
  bool mask = true;
  bool full_k = false;  // supervise all K mask channels instead of the GT channel
};

struct LossBundle {
  Tape::LossValue cls, box, mask;
  Tape::Id total = Tape::kNone;
};

/// Forward pass + loss assembly with A/B masking: cls over all RoIs, box
/// over foreground RoIs, mask over foreground RoIs whose class is in A
/// (all classes for the oracle head).
LossBundle compute_losses(TapeModel& tm, const Dataset& ds, const StepBatch& batch,
                          const SplitConfig& split, const LossEnable& enable);

struct StepOutcome {
  float cls = 0, box = 0, mask = 0;
  bool mask_empty = false;
};

/// One optimization step. Only parameters that actually received gradient
/// are touched, so anything behind stop_gradient stays bitwise intact.
StepOutcome run_train_step(Model& model, const Dataset& ds, const SplitConfig& split,
                           const TrainConfig& cfg, int step, float lr, const LossEnable& enable,
                           const std::function<bool(const std::string&)>& trainable);

struct LossRow {
  int step = 0;
  float lr = 0;
  float cls = 0, box = 0, mask = 0;
};

using CheckpointFn = std::function<void(const Model&, int step)>;

struct TrainOutput {
  Model model;
  std::vector<LossRow> log;
  int final_step = 0;
};

/// Full training per config. Stagewise runs `steps` of detection-only
/// training, then `steps` of mask-only training with backbone and box head
/// frozen; e2e runs one joint loop. `start_step` with `resume_from`
/// continues a checkpointed run on the identical step stream.
TrainOutput train_model(const Dataset& ds, const SplitConfig& split, const ModelConfig& mc,
                        const TrainConfig& tc, const Model* resume_from = nullptr,
                        int start_step = 0, const CheckpointFn& on_checkpoint = nullptr,
                        int checkpoint_every = 0);

void write_loss_log(const std::string& path, const std::vector<LossRow>& rows);

// --- checkpoint file: magic MASKX1, version, config hash, step counter,
// then length-prefixed named float32 blocks, crc32 trailer ---

struct CheckpointData {
  uint32_t version = 0;
  uint64_t config_hash = 0;
  int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> blocks;
};

void save_checkpoint(const std::string& path, const Model& model, int step,
                     uint64_t config_hash);
CheckpointData load_checkpoint(const std::string& path);
/// Strict: every model parameter (and velocity) must be present with a
/// matching shape, and no extra blocks may remain.
void apply_checkpoint(Model& model, const CheckpointData& data);

}  // namespace maskx
