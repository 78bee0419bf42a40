#include "maskx/viz.hpp"

#include <algorithm>
#include <filesystem>

#include "maskx/png_io.hpp"

namespace fs = std::filesystem;

namespace maskx {

namespace {

void put_px(std::vector<uint8_t>& img, int w, int y, int x, const uint8_t rgb[3]) {
  uint8_t* p = &img[(static_cast<size_t>(y) * w + x) * 3];
  p[0] = rgb[0];
  p[1] = rgb[1];
  p[2] = rgb[2];
}

void draw_box(std::vector<uint8_t>& img, int w, int h, const Box& b, const uint8_t rgb[3]) {
  for (int x = b.x0; x <= b.x1; ++x) {
    put_px(img, w, std::clamp(b.y0, 0, h - 1), std::clamp(x, 0, w - 1), rgb);
    put_px(img, w, std::clamp(b.y1, 0, h - 1), std::clamp(x, 0, w - 1), rgb);
  }
  for (int y = b.y0; y <= b.y1; ++y) {
    put_px(img, w, std::clamp(y, 0, h - 1), std::clamp(b.x0, 0, w - 1), rgb);
    put_px(img, w, std::clamp(y, 0, h - 1), std::clamp(b.x1, 0, w - 1), rgb);
  }
}

void draw_contour(std::vector<uint8_t>& img, int w, int h, const Bitmask& m,
                  const uint8_t rgb[3]) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!m.at(y, x)) continue;
      const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1 || !m.at(y - 1, x) ||
                        !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      if (edge) put_px(img, w, y, x, rgb);
    }
  }
}

}  // namespace

void write_overlays(const Dataset& ds, const SplitConfig& split, const std::string& dir,
                    int count, Model* model, const EvalOptions& opt) {
  static const uint8_t kGreen[3] = {0, 255, 0};
  static const uint8_t kRed[3] = {255, 0, 0};
  fs::create_directories(dir);
  const int n = std::min<int>(count, static_cast<int>(ds.records.size()));

  std::vector<Detection> dets;
  if (model) {
    Dataset head;
    head.canvas_h = ds.canvas_h;
    head.canvas_w = ds.canvas_w;
    head.config_hash = ds.config_hash;
    head.records.assign(ds.records.begin(), ds.records.begin() + n);
    dets = run_inference(*model, head, opt);
  }

  for (int i = 0; i < n; ++i) {
    const SceneRecord& rec = ds.records[static_cast<size_t>(i)];
    std::vector<uint8_t> img = rec.image;
    if (model) {
      for (const Detection& d : dets) {
        if (d.image_id != rec.id) continue;
        const uint8_t* color = split.in_a(d.category - 1) ? kGreen : kRed;
        draw_contour(img, rec.w, rec.h, d.mask, color);
        draw_box(img, rec.w, rec.h, d.box, color);
      }
    } else {
      for (const Instance& inst : rec.instances) {
        const uint8_t* color = split.in_a(inst.category) ? kGreen : kRed;
        draw_contour(img, rec.w, rec.h, inst.mask, color);
        draw_box(img, rec.w, rec.h, inst.box, color);
      }
    }
    write_png_rgb8((fs::path(dir) / ("overlay_" + std::to_string(rec.id) + ".png")).string(),
                   rec.w, rec.h, img);
  }
}

}  // namespace maskx
