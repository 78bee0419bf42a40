#include "maskx/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace maskx {

const std::array<CategoryDesc, 10>& vocabulary() {
  static const std::array<CategoryDesc, 10> vocab = {{
      {ShapeKind::Disk, false, "disk_solid"},
      {ShapeKind::Square, false, "square_solid"},
      {ShapeKind::Triangle, false, "triangle_solid"},
      {ShapeKind::Star, false, "star_solid"},
      {ShapeKind::Annulus, false, "annulus_solid"},
      {ShapeKind::Disk, true, "disk_striped"},
      {ShapeKind::Square, true, "square_striped"},
      {ShapeKind::Triangle, true, "triangle_striped"},
      {ShapeKind::Star, true, "star_striped"},
      {ShapeKind::Annulus, true, "annulus_striped"},
  }};
  return vocab;
}

void GenConfig::validate() const {
  check(canvas_h >= 16 && canvas_w >= 16, "gen: canvas too small");
  check(min_instances >= 1 && max_instances >= min_instances, "gen: bad instance range");
  check(min_size > 0 && max_size >= min_size && max_size <= 1.0, "gen: bad size range");
  check(max_overlap >= 0 && max_overlap < 1.0, "gen: overlap cap must be in [0,1)");
  check(noise >= 0, "gen: noise must be >= 0");
}

uint64_t GenConfig::hash() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "gen|%d|%d|%d|%d|%.9g|%.9g|%.9g|%.9g", canvas_h, canvas_w,
                min_instances, max_instances, min_size, max_size, max_overlap, noise);
  return fnv1a64(buf, std::strlen(buf));
}

Box derive_bbox(const Bitmask& mask) {
  int x0 = mask.w, y0 = mask.h, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.h; ++y) {
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  check(x1 >= 0, "derive_bbox: empty mask");
  return {x0, y0, x1, y1};
}

namespace {

struct Poly {
  std::vector<double> xs, ys;
};

Poly make_polygon(ShapeKind kind, double cx, double cy, double r, double angle) {
  Poly p;
  auto vertex = [&](double rad, double a) {
    p.xs.push_back(cx + rad * std::cos(a));
    p.ys.push_back(cy + rad * std::sin(a));
  };
  const double tau = 6.283185307179586;
  switch (kind) {
    case ShapeKind::Square:
      for (int i = 0; i < 4; ++i) vertex(r, angle + tau * i / 4.0);
      break;
    case ShapeKind::Triangle:
      for (int i = 0; i < 3; ++i) vertex(r, angle + tau * i / 3.0);
      break;
    case ShapeKind::Star:
      for (int i = 0; i < 10; ++i) vertex(i % 2 == 0 ? r : 0.45 * r, angle + tau * i / 10.0);
      break;
    default:
      fail("make_polygon: not a polygon kind");
  }
  return p;
}

bool point_in_polygon(const Poly& p, double x, double y) {
  bool inside = false;
  const size_t n = p.xs.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const double xi = p.xs[i], yi = p.ys[i];
    const double xj = p.xs[j], yj = p.ys[j];
    if ((yi > y) != (yj > y)) {
      const double t = (y - yi) / (yj - yi);
      if (x < xi + t * (xj - xi)) inside = !inside;
    }
  }
  return inside;
}

struct ShapeParams {
  ShapeKind kind;
  double cx, cy, r, angle;
};

Bitmask rasterize(const ShapeParams& s, int h, int w) {
  Bitmask m(h, w);
  const int x_lo = std::max(0, static_cast<int>(std::floor(s.cx - s.r - 1)));
  const int x_hi = std::min(w - 1, static_cast<int>(std::ceil(s.cx + s.r + 1)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(s.cy - s.r - 1)));
  const int y_hi = std::min(h - 1, static_cast<int>(std::ceil(s.cy + s.r + 1)));
  Poly poly;
  if (s.kind == ShapeKind::Square || s.kind == ShapeKind::Triangle || s.kind == ShapeKind::Star)
    poly = make_polygon(s.kind, s.cx, s.cy, s.r, s.angle);
  const double r2 = s.r * s.r;
  const double inner2 = 0.55 * s.r * 0.55 * s.r;
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = px - s.cx, dy = py - s.cy;
      bool in = false;
      switch (s.kind) {
        case ShapeKind::Disk:
          in = dx * dx + dy * dy <= r2;
          break;
        case ShapeKind::Annulus: {
          const double d2 = dx * dx + dy * dy;
          in = d2 <= r2 && d2 >= inner2;
          break;
        }
        default:
          in = point_in_polygon(poly, px, py);
      }
      if (in) m.set(y, x, 1);
    }
  }
  return m;
}

double overlap_fraction(const Bitmask& a, const Bitmask& b) {
  int64_t inter = 0;
  for (size_t i = 0; i < a.px.size(); ++i) inter += (a.px[i] & b.px[i]);
  const int64_t mn = std::min(a.area(), b.area());
  return mn == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(mn);
}

}  // namespace

SceneRecord generate_scene(uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x5ce4e));
  const int h = cfg.canvas_h, w = cfg.canvas_w;

  SceneRecord rec;
  rec.h = h;
  rec.w = w;

  // low-frequency background: base color + directional ramp + soft sine
  std::vector<float> img(static_cast<size_t>(h) * w * 3);
  double base[3], ramp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.75);
    ramp[c] = rng.uniform(-0.25, 0.25);
  }
  const double ga = rng.uniform(0, 6.283185307179586);
  const double gx = std::cos(ga), gy = std::sin(ga);
  const double freq = rng.uniform(1.0, 2.5);
  const double phase = rng.uniform(0, 6.283185307179586);
  const double diag = std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double t = ((x + 0.5) * gx + (y + 0.5) * gy) / diag;
      const double s = 0.06 * std::sin(freq * 6.283185307179586 * t + phase);
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<float>(base[c] + ramp[c] * t + s);
    }
  }

  const int want = rng.uniform_int(cfg.min_instances, cfg.max_instances);
  const double dmin = cfg.min_size * std::min(h, w);
  const double dmax = cfg.max_size * std::min(h, w);

  struct Placed {
    ShapeParams sp;
    int category;
    Bitmask mask;
  };
  std::vector<Placed> placed;
  int attempts = 0;
  while (static_cast<int>(placed.size()) < want) {
    check(++attempts <= 1000, "generate_scene: rejection sampling budget exhausted (config infeasible)");
    ShapeParams sp;
    const int category = rng.uniform_int(0, kNumCategories - 1);
    sp.kind = vocabulary()[static_cast<size_t>(category)].kind;
    sp.r = rng.uniform(dmin, dmax) / 2.0;
    if (sp.r * 2 >= std::min(h, w) - 2) continue;
    sp.cx = rng.uniform(sp.r, w - sp.r);
    sp.cy = rng.uniform(sp.r, h - sp.r);
    sp.angle = rng.uniform(0, 6.283185307179586);
    Bitmask m = rasterize(sp, h, w);
    if (m.area() == 0) continue;
    bool ok = true;
    for (const Placed& q : placed) {
      if (overlap_fraction(m, q.mask) > cfg.max_overlap) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    placed.push_back({sp, category, std::move(m)});
  }

  // render in placement order; striped fill alternates two tones along
  // the shape's own axis
  for (const Placed& q : placed) {
    double col[3], col2[3];
    for (int c = 0; c < 3; ++c) {
      col[c] = rng.uniform(0.05, 0.95);
      col2[c] = col[c] * 0.35;
    }
    const bool striped = vocabulary()[static_cast<size_t>(q.category)].striped;
    const double period = std::max(3.0, q.sp.r / 3.0);
    const double ca = std::cos(q.sp.angle), sa = std::sin(q.sp.angle);
    const Box b = derive_bbox(q.mask);
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) {
        if (!q.mask.at(y, x)) continue;
        const double* use = col;
        if (striped) {
          const double t = (x + 0.5 - q.sp.cx) * ca + (y + 0.5 - q.sp.cy) * sa;
          const int band = static_cast<int>(std::floor(t / period));
          if (((band % 2) + 2) % 2 == 1) use = col2;
        }
        for (int c = 0; c < 3; ++c) img[(static_cast<size_t>(y) * w + x) * 3 + c] = static_cast<float>(use[c]);
      }
    }
  }

  // global uniform noise, then quantize to the canonical 8-bit image
  rec.image.resize(img.size());
  for (size_t i = 0; i < img.size(); ++i) {
    double v = img[i] + rng.uniform(-cfg.noise, cfg.noise);
    v = std::min(1.0, std::max(0.0, v));
    rec.image[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }

  for (Placed& q : placed) {
    Instance inst;
    inst.category = q.category;
    inst.box = derive_bbox(q.mask);
    inst.mask = std::move(q.mask);
    rec.instances.push_back(std::move(inst));
  }
  return rec;
}

bool SplitConfig::in_a(int category) const {
  return std::binary_search(a.begin(), a.end(), category);
}

uint64_t SplitConfig::hash() const {
  std::string s = "A:";
  for (int id : a) s += std::to_string(id) + ",";
  s += "|B:";
  for (int id : b) s += std::to_string(id) + ",";
  return fnv1a64(s);
}

SplitConfig split_classes(int vocab_size, int a_size, bool mode_random, uint64_t seed) {
  check(a_size >= 1 && a_size < vocab_size, "split_classes: |A| must be in [1, vocab)");
  std::vector<int> ids(static_cast<size_t>(vocab_size));
  for (int i = 0; i < vocab_size; ++i) ids[static_cast<size_t>(i)] = i;
  if (mode_random) {
    Rng rng(mix_seed(seed, 0x59117));
    for (int i = vocab_size - 1; i > 0; --i) {
      const int j = rng.uniform_int(0, i);
      std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
  }
  SplitConfig sc;
  sc.a.assign(ids.begin(), ids.begin() + a_size);
  sc.b.assign(ids.begin() + a_size, ids.end());
  std::sort(sc.a.begin(), sc.a.end());
  std::sort(sc.b.begin(), sc.b.end());
  return sc;
}

}  // namespace maskx
