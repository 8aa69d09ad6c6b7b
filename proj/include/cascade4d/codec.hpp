// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exactly invertible latent codec: every patch x patch RGB block is flattened
// to a 3*patch^2 vector and multiplied by a seeded orthonormal matrix.

#include <cmath>
#include <cstdint>
#include <vector>

#include "cascade4d/grid.hpp"
#include "cascade4d/rng.hpp"
#include "cascade4d/tensor.hpp"

namespace c4d {

class CodecSpec {
 public:
  explicit CodecSpec(std::size_t patch = 4, std::uint64_t seed = 7) : patch_(patch), seed_(seed) {
    if (patch == 0) throw ConfigError("codec patch must be positive");
    const std::size_t d = channels();
    mix_ = Tensor::randn({d, d}, CounterRng(seed, 0xC0DEC));
    // modified Gram-Schmidt, applied twice for orthogonality to round-off
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t i = 0; i < d; ++i) {
        double* ri = &mix_[i * d];
        for (std::size_t j = 0; j < i; ++j) {
          const double* rj = &mix_[j * d];
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k) dot += ri[k] * rj[k];
          for (std::size_t k = 0; k < d; ++k) ri[k] -= dot * rj[k];
        }
        double nrm = 0.0;
        for (std::size_t k = 0; k < d; ++k) nrm += ri[k] * ri[k];
        nrm = std::sqrt(nrm);
        for (std::size_t k = 0; k < d; ++k) ri[k] /= nrm;
      }
  }

  std::size_t patch() const { return patch_; }
  std::size_t channels() const { return 3 * patch_ * patch_; }
  std::uint64_t seed() const { return seed_; }
  /// Rows are the latent basis vectors.
  const Tensor& mixing() const { return mix_; }

 private:
  std::size_t patch_;
  std::uint64_t seed_;
  Tensor mix_;
};

/// [N, 3, H, W] -> [N, 3p^2, H/p, W/p].
inline Tensor encode_frames(const Tensor& frames, const CodecSpec& spec) {
  if (frames.rank() != 4 || frames.dim(1) != 3) throw ShapeError("encode expects [N, 3, H, W]");
  const std::size_t p = spec.patch(), N = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
  if (H % p || W % p)
    throw ShapeError("resolution " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch " +
                     std::to_string(p));
  const std::size_t h = H / p, w = W / p, D = spec.channels();
  const Tensor& M = spec.mixing();
  Tensor out({N, D, h, w});
  std::vector<double> x(D);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t py = 0; py < h; ++py)
      for (std::size_t px = 0; px < w; ++px) {
        std::size_t j = 0;
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx) x[j++] = frames[((n * 3 + c) * H + py * p + dy) * W + px * p + dx];
        for (std::size_t i = 0; i < D; ++i) {
          double s = 0.0;
          for (std::size_t k = 0; k < D; ++k) s += M[i * D + k] * x[k];
          out[((n * D + i) * h + py) * w + px] = s;
        }
      }
  return out;
}

/// Exact inverse of encode_frames.
inline Tensor decode_frames(const Tensor& latent, const CodecSpec& spec) {
  const std::size_t D = spec.channels();
  if (latent.rank() != 4 || latent.dim(1) != D)
    throw ShapeError("decode expects [N, " + std::to_string(D) + ", h, w], got " + shape_str(latent.shape()));
  const std::size_t p = spec.patch(), N = latent.dim(0), h = latent.dim(2), w = latent.dim(3);
  const std::size_t H = h * p, W = w * p;
  const Tensor& M = spec.mixing();
  Tensor out({N, 3, H, W});
  std::vector<double> z(D);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t py = 0; py < h; ++py)
      for (std::size_t px = 0; px < w; ++px) {
        for (std::size_t i = 0; i < D; ++i) z[i] = latent[((n * D + i) * h + py) * w + px];
        std::size_t j = 0;
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx, ++j) {
              double s = 0.0;
              for (std::size_t i = 0; i < D; ++i) s += M[i * D + j] * z[i];
              out[((n * 3 + c) * H + py * p + dy) * W + px * p + dx] = s;
            }
      }
  return out;
}

namespace detail {

inline Tensor merge_leading(const Tensor& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  s[0] *= t.dim(0);
  return t.reshaped(std::move(s));
}

}  // namespace detail

inline LatentGrid encode(const ImageGrid& g, const CodecSpec& spec) {
  const std::size_t T = g.frames(), V = g.views();
  Tensor z = encode_frames(detail::merge_leading(g.pixels), spec);
  return LatentGrid{z.reshaped({T, V, z.dim(1), z.dim(2), z.dim(3)}), g.view_ids};
}

/// Decodes a latent grid. Pixels are clamped to [0, 1] so the result is a
/// valid ImageGrid; exact codes of valid images pass through unchanged.
inline ImageGrid decode(const LatentGrid& z, const CodecSpec& spec, const CameraRing& ring, double fps = 10.0) {
  if (z.values.rank() != 5 || z.channels() != spec.channels())
    throw ShapeError("latent channel count " + (z.values.rank() == 5 ? std::to_string(z.channels()) : "?") +
                     " does not match codec (" + std::to_string(spec.channels()) + ")");
  const std::size_t T = z.frames(), V = z.views();
  Tensor x = decode_frames(detail::merge_leading(z.values), spec);
  for (double& v : x.vec()) v = std::clamp(v, 0.0, 1.0);
  std::vector<std::size_t> ids = z.view_ids;
  if (ids.empty())
    for (std::size_t v = 0; v < V; ++v) ids.push_back(v);
  return ImageGrid{x.reshaped({T, V, 3, x.dim(2), x.dim(3)}), ring, std::move(ids), fps};
}

/// Decode without clamping, for identity checks on arbitrary latents.
inline Tensor decode_raw(const LatentGrid& z, const CodecSpec& spec) {
  const std::size_t T = z.frames(), V = z.views();
  Tensor x = decode_frames(detail::merge_leading(z.values), spec);
  return x.reshaped({T, V, 3, x.dim(2), x.dim(3)});
}

}  // namespace c4d
