// SPDX-License-Identifier: Apache-2.0
#pragma once

// Orthographic ray caster for a handful of analytic primitives.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>

#include "cascade4d/grid.hpp"
#include "cascade4d/rng.hpp"

namespace c4d {

enum class Primitive { box, sphere, two_body };

using Vec3 = std::array<double, 3>;

struct Motion {
  double rotation_rate = 0.0;  // radians per frame about the vertical axis
  double translation_amplitude = 0.0;
  Vec3 translation_axis{1.0, 0.0, 0.0};
  double translation_period = 8.0;  // frames
  double deformation_amplitude = 0.0;
  double deformation_period = 8.0;

  double angle(std::size_t t) const { return rotation_rate * static_cast<double>(t); }
  Vec3 offset(std::size_t t) const {
    const double s =
        translation_amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / translation_period);
    return {s * translation_axis[0], s * translation_axis[1], s * translation_axis[2]};
  }
  double scale(std::size_t t) const {
    return 1.0 +
           deformation_amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / deformation_period);
  }
};

struct SceneSpec {
  Primitive primitive = Primitive::box;
  std::array<Vec3, 6> colors{};  // per box face, or per longitude band on spheres
  bool checker = true;
  double size = 0.5;  // half extent in world units; the view spans [-1, 1]
  Motion motion;
  double background = 0.0;
  std::uint64_t seed = 0;

  /// Random colours and primitive kind; motion left static.
  static SceneSpec from_seed(std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    RngStream r(seed, 0x5CE7E);
    s.primitive = static_cast<Primitive>(r.below(3));
    for (auto& c : s.colors)
      for (auto& ch : c) ch = 0.2 + 0.8 * r.uniform();
    s.size = 0.4 + 0.15 * r.uniform();
    return s;
  }
};

namespace detail {

inline Vec3 rot_y(const Vec3& p, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]};
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 color{};
};

inline double checker_gain(double u, double v, double half) {
  // the phase keeps cell edges off pixel centres of the default ring
  const double cell = half / 2.0, phase = 0.3183;
  const auto iu = static_cast<long>(std::floor((u + half) / cell + phase));
  const auto iv = static_cast<long>(std::floor((v + half) / cell + phase));
  return ((iu + iv) & 1) ? 0.6 : 1.0;
}

inline void hit_box(const Vec3& o, const Vec3& d, const Vec3& c, double half, const SceneSpec& s, Hit& best) {
  double tn = -std::numeric_limits<double>::infinity(), tf = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int i = 0; i < 3; ++i) {
    const double oi = o[i] - c[i];
    if (std::abs(d[i]) < 1e-15) {
      if (std::abs(oi) > half) return;
      continue;
    }
    double t0 = (-half - oi) / d[i], t1 = (half - oi) / d[i];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tn) {
      tn = t0;
      axis = i;
    }
    tf = std::min(tf, t1);
  }
  if (axis < 0 || tn > tf || tn < 0 || tn >= best.t) return;
  Vec3 p{o[0] + tn * d[0] - c[0], o[1] + tn * d[1] - c[1], o[2] + tn * d[2] - c[2]};
  const int face = 2 * axis + (d[axis] < 0 ? 0 : 1);
  Vec3 col = s.colors[face];
  if (s.checker) {
    const double g = checker_gain(p[(axis + 1) % 3], p[(axis + 2) % 3], half);
    for (auto& ch : col) ch *= g;
  }
  best = {tn, col};
}

inline void hit_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r, const SceneSpec& s, Hit& best) {
  const Vec3 oc{o[0] - c[0], o[1] - c[1], o[2] - c[2]};
  const double a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
  const double b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
  const double cc = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r;
  const double disc = b * b - a * cc;
  if (disc < 0) return;
  const double t = (-b - std::sqrt(disc)) / a;
  if (t < 0 || t >= best.t) return;
  Vec3 col = s.colors[0];
  if (s.checker) {
    const Vec3 p{oc[0] + t * d[0], oc[1] + t * d[1], oc[2] + t * d[2]};
    const double lon = std::atan2(p[0], p[2]) + std::numbers::pi;
    const auto band = std::min<std::size_t>(5, static_cast<std::size_t>(lon / (2.0 * std::numbers::pi) * 6.0));
    col = s.colors[band];
    if (p[1] > 0) col = {col[0] * 0.6, col[1] * 0.6, col[2] * 0.6};
  }
  best = {t, col};
}

/// Nearest hit of an object-space ray.
inline std::optional<Vec3> trace(const SceneSpec& s, const Vec3& o, const Vec3& d) {
  Hit best;
  switch (s.primitive) {
    case Primitive::box:
      hit_box(o, d, {0, 0, 0}, s.size, s, best);
      break;
    case Primitive::sphere:
      hit_sphere(o, d, {0, 0, 0}, s.size, s, best);
      break;
    case Primitive::two_body:
      hit_sphere(o, d, {-0.5 * s.size, 0, 0}, 0.55 * s.size, s, best);
      hit_box(o, d, {0.55 * s.size, 0.1 * s.size, 0}, 0.4 * s.size, s, best);
      break;
  }
  if (!std::isfinite(best.t)) return std::nullopt;
  return best.color;
}

/// Calls fn(y, x, colour-or-nullopt) for every pixel of cell (t, view id k).
template <typename Fn>
void cast_cell(const SceneSpec& s, const CameraRing& ring, std::size_t t, std::size_t k, std::size_t H, std::size_t W,
               Fn&& fn) {
  const double phi = ring.azimuth(k), e = ring.elevation;
  const Vec3 cam{std::cos(e) * std::sin(phi), std::sin(e), std::cos(e) * std::cos(phi)};
  const Vec3 right{std::cos(phi), 0.0, -std::sin(phi)};
  const Vec3 up{-std::sin(e) * std::sin(phi), std::cos(e), -std::sin(e) * std::cos(phi)};
  const double theta = s.motion.angle(t), sc = s.motion.scale(t);
  const Vec3 off = s.motion.offset(t);
  const double dist = ring.radius + 2.0;
  const Vec3 dw{-cam[0], -cam[1], -cam[2]};
  const Vec3 d = rot_y(Vec3{dw[0] / sc, dw[1] / sc, dw[2] / sc}, -theta);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(W) - 1.0;
      const double v = 1.0 - 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(H);
      Vec3 ow;
      for (int i = 0; i < 3; ++i) ow[i] = u * right[i] + v * up[i] + dist * cam[i] - off[i];
      const Vec3 o = rot_y(Vec3{ow[0] / sc, ow[1] / sc, ow[2] / sc}, -theta);
      fn(y, x, trace(s, o, d));
    }
}

}  // namespace detail

inline ImageGrid render_scene(const SceneSpec& s, const CameraRing& ring, std::size_t T, std::size_t H,
                              std::size_t W, double fps = 10.0) {
  ring.validate();
  const std::size_t V = ring.views;
  Tensor px({T, V, 3, H, W});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < V; ++k) {
      const std::size_t base = (t * V + k) * 3 * H * W;
      detail::cast_cell(s, ring, t, k, H, W, [&](std::size_t y, std::size_t x, const std::optional<Vec3>& c) {
        for (std::size_t ch = 0; ch < 3; ++ch)
          px[base + ch * H * W + y * W + x] = std::clamp(c ? (*c)[ch] : s.background, 0.0, 1.0);
      });
    }
  std::vector<std::size_t> ids(V);
  for (std::size_t v = 0; v < V; ++v) ids[v] = v;
  return ImageGrid{std::move(px), ring, std::move(ids), fps};
}

/// Object coverage of cell (t, view id k): 1 where a ray hits, else 0.
inline Tensor render_coverage(const SceneSpec& s, const CameraRing& ring, std::size_t t, std::size_t k,
                              std::size_t H, std::size_t W) {
  Tensor m({H, W});
  detail::cast_cell(s, ring, t, k, H, W,
                    [&](std::size_t y, std::size_t x, const std::optional<Vec3>& c) { m[y * W + x] = c ? 1.0 : 0.0; });
  return m;
}

}  // namespace c4d
