#pragma once

#include <cstdint>
#include <vector>

#include "maskx/tensor.hpp"

namespace maskx {

/// Counts of alternating 0/1 runs over a row-major binary mask, starting
/// with the 0-run (which may be zero-length).
inline std::vector<int64_t> rle_encode(const std::vector<uint8_t>& mask) {
  std::vector<int64_t> runs;
  uint8_t cur = 0;
  int64_t count = 0;
  for (uint8_t p : mask) {
    const uint8_t bit = p ? 1 : 0;
    if (bit == cur) {
      ++count;
    } else {
      runs.push_back(count);
      cur = bit;
      count = 1;
    }
  }
  runs.push_back(count);
  return runs;
}

inline std::vector<uint8_t> rle_decode(const std::vector<int64_t>& runs, int64_t n) {
  std::vector<uint8_t> mask;
  mask.reserve(static_cast<size_t>(n));
  uint8_t cur = 0;
  for (int64_t r : runs) {
    check(r >= 0, "rle_decode: negative run");
    mask.insert(mask.end(), static_cast<size_t>(r), cur);
    cur ^= 1;
  }
  check(static_cast<int64_t>(mask.size()) == n, "rle_decode: run total does not match mask size");
  return mask;
}

}  // namespace maskx
