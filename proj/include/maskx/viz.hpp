#pragma once

#include <string>

#include "maskx/dataset.hpp"
#include "maskx/eval.hpp"

namespace maskx {

/// PNG overlays with A-set instances in green and B-set in red (box border
/// plus mask contour). With a model, predicted masks are drawn instead of
/// ground truth.
void write_overlays(const Dataset& ds, const SplitConfig& split, const std::string& dir,
                    int count, Model* model, const EvalOptions& opt);

}  // namespace maskx
