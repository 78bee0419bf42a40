#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "maskx/rng.hpp"
#include "maskx/tensor.hpp"

namespace maskx {

/// Inclusive pixel box, x = column, y = row.
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
};

struct Bitmask {
  int h = 0, w = 0;
  std::vector<uint8_t> px;  // row-major 0/1

  Bitmask() = default;
  Bitmask(int h_, int w_) : h(h_), w(w_), px(static_cast<size_t>(h_) * w_, 0) {}
  uint8_t at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
  void set(int y, int x, uint8_t v) { px[static_cast<size_t>(y) * w + x] = v; }
  int64_t area() const {
    int64_t n = 0;
    for (uint8_t p : px) n += p;
    return n;
  }
};

enum class ShapeKind { Disk, Square, Triangle, Star, Annulus };

struct CategoryDesc {
  ShapeKind kind;
  bool striped;
  const char* name;
};

/// Fixed 10-category vocabulary: 5 silhouettes x {solid, striped},
/// solid fills first (ids 0..4), striped second (ids 5..9).
const std::array<CategoryDesc, 10>& vocabulary();
constexpr int kNumCategories = 10;

struct GenConfig {
  int canvas_h = 128;
  int canvas_w = 128;
  int min_instances = 1;
  int max_instances = 4;
  double min_size = 0.15;  // fraction of min(canvas)
  double max_size = 0.45;
  double max_overlap = 0.2;  // pairwise |a&b| / min(|a|,|b|) cap
  double noise = 0.05;

  void validate() const;
  uint64_t hash() const;
};

struct Instance {
  int category = 0;  // vocabulary id, 0-based
  Bitmask mask;
  Box box;
};

struct SceneRecord {
  int id = 0;
  int h = 0, w = 0;
  std::vector<uint8_t> image;  // h*w*3 RGB, canonical 8-bit
  std::vector<Instance> instances;

  float pixel(int y, int x, int c) const {
    return static_cast<float>(image[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  }
};

/// Tight bounds of the set pixels: (min col, min row, max col, max row).
Box derive_bbox(const Bitmask& mask);

/// Deterministic function of (seed, config). Throws if rejection sampling
/// cannot place the requested instances within 1000 attempts.
SceneRecord generate_scene(uint64_t seed, const GenConfig& config);

struct SplitConfig {
  std::vector<int> a;  // mask-supervised categories, sorted
  std::vector<int> b;  // box-only categories, sorted

  bool in_a(int category) const;
  uint64_t hash() const;
};

/// mode_random=false takes the first |A| ids; true draws a deterministic
/// random subset per seed.
SplitConfig split_classes(int vocab_size, int a_size, bool mode_random, uint64_t seed);

}  // namespace maskx
