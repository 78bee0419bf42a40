#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maskx {

/// 8-bit RGB PNG write/read (the only pixel format this project stores).
void write_png_rgb8(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb);
std::vector<uint8_t> read_png_rgb8(const std::string& path, int* w, int* h);

}  // namespace maskx
