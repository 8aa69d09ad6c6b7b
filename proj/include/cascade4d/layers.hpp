// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameterized building blocks shared by the denoiser and the branch.

#include <cmath>
#include <string>
#include <vector>

#include "cascade4d/autodiff.hpp"
#include "cascade4d/params.hpp"

namespace c4d {

// ---------------------------------------------------------------------------
// Initialization

inline void init_linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out,
                        std::uint64_t seed, Partition p = Partition::base, double gain = 1.0) {
  ps.add_normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)), p, seed);
  ps.add_zeros(name + ".b", {out}, p);
}

inline void init_lora(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t rank,
                      std::uint64_t seed) {
  ps.add_normal(name + ".lora_down", {in, rank}, 1.0 / std::sqrt(static_cast<double>(in)), Partition::lora, seed);
  ps.add_zeros(name + ".lora_up", {rank, out}, Partition::lora);
}

inline void init_conv(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                      std::uint64_t seed, Partition p = Partition::base, double gain = 1.0) {
  ps.add_normal(name + ".w", {out, in, k, k}, gain / std::sqrt(static_cast<double>(in * k * k)), p, seed);
  ps.add_zeros(name + ".b", {out}, p);
}

inline void init_zero_conv(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out,
                           Partition p) {
  ps.add_zeros(name + ".w", {out, in, 1, 1}, p);
  ps.add_zeros(name + ".b", {out}, p);
}

// ---------------------------------------------------------------------------
// Application

/// x: [..., in] -> [..., out]. Adds the low-rank path when the adapter
/// exists in the store and `lora_scale` is non-zero.
inline Var linear(Binder& P, const std::string& name, Var x, double lora_scale = 0.0) {
  Var y = add(matmul(x, P(name + ".w")), P(name + ".b"));
  if (lora_scale != 0.0 && P.has(name + ".lora_down")) {
    Var low = matmul(matmul(x, P(name + ".lora_down")), P(name + ".lora_up"));
    y = add(y, scale(low, lora_scale));
  }
  return y;
}

/// Applies a matrix to rank-2+ input by flattening the leading axes.
inline Var linear_tokens(Binder& P, const std::string& name, Var x, double lora_scale = 0.0) {
  const Shape s = x.shape();
  if (s.size() == 1) return reshape(linear(P, name, reshape(x, {1, s[0]}), lora_scale), {P.store().get(name + ".b").dim(0)});
  const std::size_t rows = numel(s) / s.back();
  Var y = linear(P, name, reshape(x, {rows, s.back()}), lora_scale);
  Shape os = s;
  os.back() = y.shape().back();
  return reshape(y, os);
}

inline Var conv(Binder& P, const std::string& name, Var x, std::size_t stride = 1) {
  Var w = P(name + ".w");
  const std::size_t k = w.shape()[2];
  Var y = conv2d(x, w, stride, k / 2);
  const std::size_t out = w.shape()[0];
  return add(y, reshape(P(name + ".b"), {1, out, 1, 1}));
}

// ---------------------------------------------------------------------------
// Embeddings

/// Standard transformer sinusoid: [sin(p w_0), ..., cos(p w_0), ...].
inline Tensor sinusoid(double pos, std::size_t width, double max_period = 10000.0) {
  Tensor e({width});
  const std::size_t half = width / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(pos * f);
    e[half + i] = std::cos(pos * f);
  }
  return e;
}

/// [h*w, width]: first half encodes rows, second half columns.
inline Tensor sinusoid_2d(std::size_t h, std::size_t w, std::size_t width) {
  Tensor out({h * w, width});
  const std::size_t half = width / 2;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Tensor ey = sinusoid(static_cast<double>(y), half, 100.0);
      const Tensor ex = sinusoid(static_cast<double>(x), width - half, 100.0);
      for (std::size_t i = 0; i < half; ++i) out[(y * w + x) * width + i] = ey[i];
      for (std::size_t i = 0; i < width - half; ++i) out[(y * w + x) * width + half + i] = ex[i];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionSpec {
  std::size_t heads = 4;
  double lora_scale = 0.0;
};

/// Multi-head attention: queries q [B, n, C], keys/values kv [B, m, C].
/// Inputs are expected already normalized. Returns [B, n, C] after the
/// output projection (no residual).
inline Var multi_head_attention(Binder& P, const std::string& name, Var q_in, Var kv_in, const AttentionSpec& a,
                                Var* weights_out = nullptr) {
  const Shape qs = q_in.shape(), ks = kv_in.shape();
  const std::size_t B = qs[0], n = qs[1], C = qs[2], m = ks[1];
  if (ks[0] != B || ks[2] != C) throw ShapeError("attention query/key shape mismatch");
  if (a.heads == 0 || C % a.heads) throw ShapeError("channels " + std::to_string(C) + " not divisible by heads");
  const std::size_t H = a.heads, d = C / H;
  auto heads = [&](Var x, std::size_t len) {
    return reshape(transpose(reshape(x, {B, len, H, d}), {0, 2, 1, 3}), {B * H, len, d});
  };
  Var Q = heads(linear_tokens(P, name + ".q", q_in, a.lora_scale), n);
  Var K = heads(linear_tokens(P, name + ".k", kv_in, a.lora_scale), m);
  Var V = heads(linear_tokens(P, name + ".v", kv_in, a.lora_scale), m);
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  if (weights_out) *weights_out = softmax(scale(matmul(Q, transpose(K, {0, 2, 1})), sc), -1);
  Var O = attention(Q, K, V, sc);
  O = reshape(transpose(reshape(O, {B, H, n, d}), {0, 2, 1, 3}), {B, n, C});
  return linear_tokens(P, name + ".out", O, a.lora_scale);
}

inline void init_attention(ParameterStore& ps, const std::string& name, std::size_t C, std::size_t lora_rank,
                           std::uint64_t seed, double out_gain = 1.0) {
  for (const char* proj : {".q", ".k", ".v", ".out"}) {
    init_linear(ps, name + proj, C, C, seed, Partition::base, proj[1] == 'o' ? out_gain : 1.0);
    if (lora_rank) init_lora(ps, name + proj, C, C, lora_rank, seed);
  }
}

}  // namespace c4d
