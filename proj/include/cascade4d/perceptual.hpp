// SPDX-License-Identifier: Apache-2.0
#pragma once

// Laplacian-pyramid feature distance between [3, H, W] frames.

#include <cmath>
#include <vector>

#include "cascade4d/tensor.hpp"

namespace c4d {

struct PerceptualOptions {
  std::size_t levels = 4;  // band-pass levels; the low-pass residual is added on top
};

namespace detail {

/// 2x2 mean pooling of one plane; odd trailing rows/columns fold into the
/// last cell.
inline std::vector<double> pool_plane(const std::vector<double>& p, std::size_t H, std::size_t W, std::size_t& h,
                                      std::size_t& w) {
  h = (H + 1) / 2;
  w = (W + 1) / 2;
  std::vector<double> out(h * w, 0.0), cnt(h * w, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      out[(y / 2) * w + x / 2] += p[y * W + x];
      cnt[(y / 2) * w + x / 2] += 1.0;
    }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= cnt[i];
  return out;
}

/// Bands from fine to coarse, last entry is the low-pass residual.
inline std::vector<std::vector<double>> laplacian_bands(std::vector<double> p, std::size_t H, std::size_t W,
                                                        std::size_t levels) {
  std::vector<std::vector<double>> bands;
  for (std::size_t l = 0; l < levels && H > 1 && W > 1; ++l) {
    std::size_t h, w;
    std::vector<double> low = pool_plane(p, H, W, h, w);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) p[y * W + x] -= low[(y / 2) * w + x / 2];
    bands.push_back(std::move(p));
    p = std::move(low);
    H = h;
    W = w;
  }
  bands.push_back(std::move(p));
  return bands;
}

}  // namespace detail

/// Sum over pyramid bands and channels of the band RMS difference.
/// Symmetric, and zero only for identical inputs since the pyramid is
/// invertible.
inline double perceptual_distance(const Tensor& a, const Tensor& b, const PerceptualOptions& o = {}) {
  if (a.shape() != b.shape())
    throw ShapeError("perceptual distance resolution mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.rank() != 3) throw ShapeError("perceptual distance expects [C, H, W]");
  const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2), n = H * W;
  double total = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> diff(n);
    for (std::size_t i = 0; i < n; ++i) diff[i] = a[c * n + i] - b[c * n + i];
    for (const auto& band : detail::laplacian_bands(std::move(diff), H, W, o.levels)) {
      double s = 0.0;
      for (double v : band) s += v * v;
      total += std::sqrt(s / static_cast<double>(band.size()));
    }
  }
  return total / static_cast<double>(C);
}

}  // namespace c4d
