// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pyramidal Lucas-Kanade optical flow on [3, H, W] frames.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cascade4d/tensor.hpp"

namespace c4d {

struct FlowField {
  Tensor u;  // [H, W], displacement along x (columns)
  Tensor v;  // [H, W], displacement along y (rows)
  std::size_t levels = 0;

  double mean_magnitude() const {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += std::hypot(u[i], v[i]);
    return u.size() ? s / static_cast<double>(u.size()) : 0.0;
  }
};

struct FlowOptions {
  std::size_t levels = 3;
  std::size_t iterations = 5;
  std::size_t window = 5;
  std::size_t min_size = 16;  // coarsest level keeps at least this many pixels per side
  /// Smallest structure-tensor eigenvalue (window sum) that yields an update.
  double min_eigen = 1e-3;
};

inline Tensor luma(const Tensor& frame) {
  if (frame.rank() != 3 || frame.dim(0) != 3) throw ShapeError("luma expects [3, H, W], got " + shape_str(frame.shape()));
  const std::size_t n = frame.dim(1) * frame.dim(2);
  Tensor g({frame.dim(1), frame.dim(2)});
  for (std::size_t i = 0; i < n; ++i) g[i] = 0.299 * frame[i] + 0.587 * frame[n + i] + 0.114 * frame[2 * n + i];
  return g;
}

namespace detail {

inline double sample_clamped(const Tensor& img, double x, double y) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  const auto x0 = static_cast<std::size_t>(x), y0 = static_cast<std::size_t>(y);
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  return (1 - fy) * ((1 - fx) * img[y0 * W + x0] + fx * img[y0 * W + x1]) +
         fy * ((1 - fx) * img[y1 * W + x0] + fx * img[y1 * W + x1]);
}

/// Binomial [1 4 6 4 1] blur with clamped borders, then 2x subsampling.
inline Tensor half_res(const Tensor& img) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  static constexpr double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  Tensor tmp({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double a = 0.0;
      for (long d = -2; d <= 2; ++d) a += k[d + 2] * img[y * W + std::size_t(std::clamp<long>(long(x) + d, 0, long(W) - 1))];
      tmp[y * W + x] = a;
    }
  const std::size_t h = H / 2, w = W / 2;
  Tensor out({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double a = 0.0;
      for (long d = -2; d <= 2; ++d) a += k[d + 2] * tmp[std::size_t(std::clamp<long>(long(2 * y) + d, 0, long(H) - 1)) * W + 2 * x];
      out[y * w + x] = a;
    }
  return out;
}

/// Central differences with one-sided edges.
inline void gradients(const Tensor& img, Tensor& gx, Tensor& gy) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  gx = Tensor({H, W});
  gy = Tensor({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t xl = x ? x - 1 : x, xr = x + 1 < W ? x + 1 : x;
      const std::size_t yu = y ? y - 1 : y, yd = y + 1 < H ? y + 1 : y;
      gx[y * W + x] = xr > xl ? (img[y * W + xr] - img[y * W + xl]) / double(xr - xl) : 0.0;
      gy[y * W + x] = yd > yu ? (img[yd * W + x] - img[yu * W + x]) / double(yd - yu) : 0.0;
    }
}

inline void lk_level(const Tensor& a, const Tensor& b, Tensor& u, Tensor& v, const FlowOptions& o) {
  const std::size_t H = a.dim(0), W = a.dim(1);
  const long r = static_cast<long>(o.window / 2);
  Tensor ax, ay;
  gradients(a, ax, ay);
  Tensor warped({H, W}), wx, wy;
  Tensor ixx({H, W}), ixy({H, W}), iyy({H, W}), ixt({H, W}), iyt({H, W});
  for (std::size_t it = 0; it < o.iterations; ++it) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        warped[y * W + x] = sample_clamped(b, double(x) + u[y * W + x], double(y) + v[y * W + x]);
    gradients(warped, wx, wy);
    for (std::size_t i = 0; i < H * W; ++i) {
      const double gx = 0.5 * (ax[i] + wx[i]), gy = 0.5 * (ay[i] + wy[i]), gt = warped[i] - a[i];
      ixx[i] = gx * gx;
      ixy[i] = gx * gy;
      iyy[i] = gy * gy;
      ixt[i] = gx * gt;
      iyt[i] = gy * gt;
    }
    for (long y = 0; y < long(H); ++y)
      for (long x = 0; x < long(W); ++x) {
        double sxx = 0, sxy = 0, syy = 0, sxt = 0, syt = 0;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            const long yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= long(H) || xx >= long(W)) continue;
            const std::size_t j = std::size_t(yy) * W + std::size_t(xx);
            sxx += ixx[j];
            sxy += ixy[j];
            syy += iyy[j];
            sxt += ixt[j];
            syt += iyt[j];
          }
        const double det = sxx * syy - sxy * sxy, tr = sxx + syy;
        const double lmin = 0.5 * (tr - std::sqrt(std::max(0.0, tr * tr - 4.0 * det)));
        const std::size_t i = std::size_t(y) * W + std::size_t(x);
        if (!(lmin > o.min_eigen)) {
          // no usable structure: the pixel carries no motion evidence
          u[i] = v[i] = 0.0;
          continue;
        }
        u[i] += -(syy * sxt - sxy * syt) / det;
        v[i] += -(sxx * syt - sxy * sxt) / det;
      }
  }
}

}  // namespace detail

/// Flow from f1 to f2: f2(x + u, y + v) ~ f1(x, y). Constant images give a
/// zero field.
inline FlowField estimate_flow(const Tensor& f1, const Tensor& f2, const FlowOptions& o = {}) {
  if (f1.shape() != f2.shape()) throw ShapeError("flow frames differ: " + shape_str(f1.shape()) + " vs " + shape_str(f2.shape()));
  if (o.levels == 0 || o.window == 0 || o.window % 2 == 0) throw ConfigError("flow needs >= 1 level and an odd window");
  std::vector<Tensor> pa{luma(f1)}, pb{luma(f2)};
  while (pa.size() < o.levels && pa.back().dim(0) / 2 >= o.min_size && pa.back().dim(1) / 2 >= o.min_size) {
    pa.push_back(detail::half_res(pa.back()));
    pb.push_back(detail::half_res(pb.back()));
  }
  Tensor u(pa.back().shape()), v(pa.back().shape());
  for (std::size_t l = pa.size(); l-- > 0;) {
    if (u.shape() != pa[l].shape()) {
      const std::size_t H = pa[l].dim(0), W = pa[l].dim(1);
      Tensor nu({H, W}), nv({H, W});
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double sx = (double(x) - 0.5) / 2.0, sy = (double(y) - 0.5) / 2.0;
          nu[y * W + x] = 2.0 * detail::sample_clamped(u, sx, sy);
          nv[y * W + x] = 2.0 * detail::sample_clamped(v, sx, sy);
        }
      u = std::move(nu);
      v = std::move(nv);
    }
    detail::lk_level(pa[l], pb[l], u, v, o);
  }
  if (!u.all_finite() || !v.all_finite()) throw NumericalError("non-finite optical flow");
  return FlowField{std::move(u), std::move(v), pa.size()};
}

}  // namespace c4d
