#pragma once

#include <cmath>

namespace maskx {

/// One bilinear sample on a grid whose pixel k has its center at k+0.5.
/// Indices are clamped at the borders.
struct BilinearTap {
  int i0, i1, j0, j1;
  double fy, fx;
};

inline BilinearTap bilinear_tap(double sy, double sx, int h, int w) {
  const double u = sy - 0.5;
  const double v = sx - 0.5;
  const double fi = std::floor(u);
  const double fj = std::floor(v);
  BilinearTap t;
  t.fy = u - fi;
  t.fx = v - fj;
  const int i0 = static_cast<int>(fi);
  const int j0 = static_cast<int>(fj);
  auto clampi = [](int k, int hi) { return k < 0 ? 0 : (k > hi ? hi : k); };
  t.i0 = clampi(i0, h - 1);
  t.i1 = clampi(i0 + 1, h - 1);
  t.j0 = clampi(j0, w - 1);
  t.j1 = clampi(j0 + 1, w - 1);
  return t;
}

template <typename GetFn>
double bilinear_sample(const BilinearTap& t, GetFn&& get) {
  const double a00 = get(t.i0, t.j0);
  const double a01 = get(t.i0, t.j1);
  const double a10 = get(t.i1, t.j0);
  const double a11 = get(t.i1, t.j1);
  const double top = a00 + (a01 - a00) * t.fx;
  const double bot = a10 + (a11 - a10) * t.fx;
  return top + (bot - top) * t.fy;
}

}  // namespace maskx
