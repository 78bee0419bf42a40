#pragma once

#include <string>
#include <vector>

#include "maskx/shapes.hpp"

namespace maskx {

struct Dataset {
  int canvas_h = 0, canvas_w = 0;
  uint64_t config_hash = 0;
  std::vector<SceneRecord> records;

  int64_t instance_count() const {
    int64_t n = 0;
    for (const auto& r : records) n += static_cast<int64_t>(r.instances.size());
    return n;
  }
  /// Content hash over annotations + image checksums; identifies the
  /// dataset in reports.
  uint64_t content_hash() const;
};

/// Builds `count` scenes from counter-based seeds mix(seed, index).
Dataset build_dataset(uint64_t seed, int count, const GenConfig& config);

/// Layout: manifest, images/<id>.png, annotations.rle. One instance per
/// annotation line: image id, category id, box, then alternating 0/1 run
/// counts starting with the 0-run.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace maskx
