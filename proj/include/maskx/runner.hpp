#pragma once

#include <string>
#include <vector>

#include "maskx/config.hpp"
#include "maskx/dataset.hpp"
#include "maskx/eval.hpp"
#include "maskx/train.hpp"

namespace maskx {

/// CLI entry point (argv without the program name). Returns the process
/// exit code; 0 only when every requested artifact was written.
int run(const std::vector<std::string>& args);

// Config -> typed builders, shared by the CLI and the test suites.
GenConfig gen_config_from(const KvConfig& cfg);
SplitConfig split_from(const KvConfig& cfg);
ModelConfig model_config_from(const KvConfig& cfg);
TrainConfig train_config_from(const KvConfig& cfg);
EvalOptions eval_options_from(const KvConfig& cfg);

/// Hash that ties a checkpoint to the model/train/split keys it was
/// produced with (train.resume excluded so resuming stays compatible).
uint64_t checkpoint_config_hash(const KvConfig& cfg);

/// The full set of accepted configuration keys.
const std::vector<std::string>& known_config_keys();

}  // namespace maskx
