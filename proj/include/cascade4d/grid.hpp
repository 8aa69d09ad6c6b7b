// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "cascade4d/error.hpp"
#include "cascade4d/tensor.hpp"

namespace c4d {

/// V cameras equally spaced in azimuth around the vertical axis.
struct CameraRing {
  std::size_t views = 16;
  double elevation = 0.0;  // radians
  double radius = 2.0;

  double azimuth(std::size_t k) const {
    return 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(views);
  }

  void validate() const {
    if (views < 2) throw ConfigError("camera ring needs at least 2 views");
  }
};

/// T x V grid of RGB frames, pixels [T, V, 3, H, W] in [0, 1].
///
/// `view_ids` maps each grid column to its camera on the ring, so sliced
/// grids keep their poses.
struct ImageGrid {
  Tensor pixels;
  CameraRing ring;
  std::vector<std::size_t> view_ids;
  double fps = 10.0;

  std::size_t frames() const { return pixels.dim(0); }
  std::size_t views() const { return pixels.dim(1); }
  std::size_t height() const { return pixels.dim(3); }
  std::size_t width() const { return pixels.dim(4); }

  std::vector<double> azimuths() const {
    std::vector<double> a;
    for (auto id : view_ids) a.push_back(ring.azimuth(id));
    return a;
  }

  /// Builds and validates a grid. Empty `ids` means columns 0..V-1.
  static ImageGrid make(Tensor pixels, CameraRing ring, std::vector<std::size_t> ids = {}, double fps = 10.0) {
    if (pixels.rank() != 5 || pixels.dim(2) != 3)
      throw ShapeError("image grid expects [T, V, 3, H, W], got " + shape_str(pixels.shape()));
    if (ids.empty())
      for (std::size_t v = 0; v < pixels.dim(1); ++v) ids.push_back(v);
    if (ids.size() != pixels.dim(1)) throw ShapeError("view id count does not match grid views");
    for (auto id : ids)
      if (id >= ring.views) throw ShapeError("view id outside the camera ring");
    for (double p : pixels.data())
      if (!(p >= 0.0 && p <= 1.0)) throw DataError("image grid pixel outside [0, 1]");
    return ImageGrid{std::move(pixels), ring, std::move(ids), fps};
  }
};

/// Latent counterpart of ImageGrid: values [T, V, C, h, w].
struct LatentGrid {
  Tensor values;
  std::vector<std::size_t> view_ids;

  std::size_t frames() const { return values.dim(0); }
  std::size_t views() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }
  std::size_t height() const { return values.dim(3); }
  std::size_t width() const { return values.dim(4); }
};

// ---------------------------------------------------------------------------
// Generic block helpers over [A, B, rest...] tensors

namespace detail {

/// Picks entries along axis 0 or 1 of a rank>=2 tensor.
inline Tensor take(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& idx) {
  const Shape& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = idx.size();
  Tensor out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= s[axis]) throw ShapeError("index out of range");
      std::copy_n(t.data().begin() + (o * s[axis] + idx[k]) * inner, inner,
                  out.data().begin() + (o * idx.size() + k) * inner);
    }
  return out;
}

}  // namespace detail

/// Box-filter average pooling over non-overlapping factor x factor blocks of
/// the last two axes.
inline Tensor box_downsample(const Tensor& t, std::size_t factor) {
  const Shape& s = t.shape();
  const std::size_t r = s.size();
  if (r < 2 || factor == 0 || s[r - 2] % factor || s[r - 1] % factor)
    throw ShapeError("resolution " + shape_str(s) + " not divisible by " + std::to_string(factor));
  const std::size_t H = s[r - 2], W = s[r - 1], h = H / factor, w = W / factor;
  const std::size_t planes = t.size() / (H * W);
  Shape os = s;
  os[r - 2] = h;
  os[r - 1] = w;
  Tensor out(os);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx)
            acc += t[p * H * W + (y * factor + dy) * W + x * factor + dx];
        out[p * h * w + y * w + x] = acc * inv;
      }
  return out;
}

/// Nearest-neighbour upsampling of the last two axes.
inline Tensor nearest_upsample(const Tensor& t, std::size_t factor) {
  const Shape& s = t.shape();
  const std::size_t r = s.size();
  if (r < 2 || factor == 0) throw ShapeError("bad upsample request");
  const std::size_t h = s[r - 2], w = s[r - 1], H = h * factor, W = w * factor;
  const std::size_t planes = t.size() / (h * w);
  Shape os = s;
  os[r - 2] = H;
  os[r - 1] = W;
  Tensor out(os);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[p * H * W + y * W + x] = t[p * h * w + (y / factor) * w + x / factor];
  return out;
}

inline ImageGrid downsample_grid(const ImageGrid& g, std::size_t factor) {
  return ImageGrid{box_downsample(g.pixels, factor), g.ring, g.view_ids, g.fps};
}

inline ImageGrid upsample_grid(const ImageGrid& g, std::size_t factor) {
  return ImageGrid{nearest_upsample(g.pixels, factor), g.ring, g.view_ids, g.fps};
}

inline ImageGrid slice_views(const ImageGrid& g, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= g.views())
      throw ShapeError("view index " + std::to_string(idx[k]) + " out of range for " + std::to_string(g.views()) +
                       " views");
    for (std::size_t j = 0; j < k; ++j)
      if (idx[j] == idx[k]) throw ShapeError("duplicate view index " + std::to_string(idx[k]));
    ids.push_back(g.view_ids[idx[k]]);
  }
  return ImageGrid{detail::take(g.pixels, 1, idx), g.ring, std::move(ids), g.fps};
}

inline ImageGrid slice_frames(const ImageGrid& g, const std::vector<std::size_t>& idx) {
  return ImageGrid{detail::take(g.pixels, 0, idx), g.ring, g.view_ids, g.fps};
}

inline LatentGrid slice_views(const LatentGrid& g, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> ids;
  for (auto i : idx) {
    if (i >= g.views()) throw ShapeError("view index out of range");
    ids.push_back(g.view_ids.empty() ? i : g.view_ids[i]);
  }
  return LatentGrid{detail::take(g.values, 1, idx), std::move(ids)};
}

/// Frame (t, v) as [3, H, W].
inline Tensor grid_cell(const ImageGrid& g, std::size_t t, std::size_t v) {
  const std::size_t n = 3 * g.height() * g.width();
  std::vector<double> d(g.pixels.data().begin() + (t * g.views() + v) * n,
                        g.pixels.data().begin() + (t * g.views() + v + 1) * n);
  return Tensor({3, g.height(), g.width()}, std::move(d));
}

/// Stacks frames [3, H, W] into [L, 3, H, W].
inline Tensor stack_frames(const std::vector<Tensor>& frames) {
  if (frames.empty()) throw ShapeError("no frames to stack");
  Shape s = frames[0].shape();
  std::vector<double> d;
  d.reserve(frames.size() * frames[0].size());
  for (const auto& f : frames) {
    if (f.shape() != s) throw ShapeError("frame shape mismatch");
    d.insert(d.end(), f.data().begin(), f.data().end());
  }
  s.insert(s.begin(), frames.size());
  return Tensor(std::move(s), std::move(d));
}

/// Frames of one view over time: [T, 3, H, W].
inline Tensor view_sequence(const ImageGrid& g, std::size_t v) {
  std::vector<Tensor> f;
  for (std::size_t t = 0; t < g.frames(); ++t) f.push_back(grid_cell(g, t, v));
  return stack_frames(f);
}

/// All views at one frame: [V, 3, H, W].
inline Tensor frame_sequence(const ImageGrid& g, std::size_t t) {
  std::vector<Tensor> f;
  for (std::size_t v = 0; v < g.views(); ++v) f.push_back(grid_cell(g, t, v));
  return stack_frames(f);
}

/// Diagonal traversal: element k is cell (k mod T, k mod V), k < max(T, V).
inline std::vector<std::pair<std::size_t, std::size_t>> diagonal_cells(std::size_t T, std::size_t V) {
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t k = 0; k < std::max(T, V); ++k) cells.emplace_back(k % T, k % V);
  return cells;
}

inline Tensor extract_diagonal(const ImageGrid& g) {
  if (g.frames() == 0 || g.views() == 0) throw ShapeError("empty grid");
  std::vector<Tensor> f;
  for (auto [t, v] : diagonal_cells(g.frames(), g.views())) f.push_back(grid_cell(g, t, v));
  return stack_frames(f);
}

}  // namespace c4d
