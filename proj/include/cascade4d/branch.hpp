// SPDX-License-Identifier: Apache-2.0
#pragma once

// Structure branch: encodes layout latents, fuses reference-video appearance
// with MAP cross-attention and emits zero-initialized per-site injections.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cascade4d/denoiser.hpp"

namespace c4d {

enum class BranchVariant { full, controlnet, adapter };
enum class MapOrientation { reference_as_query, feature_as_query };

inline BranchVariant parse_branch_variant(const std::string& s) {
  if (s == "full") return BranchVariant::full;
  if (s == "controlnet" || s == "controlnet-style") return BranchVariant::controlnet;
  if (s == "adapter" || s == "adapter-style") return BranchVariant::adapter;
  throw ConfigError("unknown branch variant '" + s + "'");
}

inline const char* branch_variant_name(BranchVariant v) {
  switch (v) {
    case BranchVariant::full:
      return "full";
    case BranchVariant::controlnet:
      return "controlnet";
    case BranchVariant::adapter:
      return "adapter";
  }
  return "?";
}

struct BranchConfig {
  BranchVariant variant = BranchVariant::full;
  MapOrientation orientation = MapOrientation::reference_as_query;
  std::size_t map_heads = 1;

  std::vector<std::string> sites(std::size_t levels) const {
    std::vector<std::string> out;
    for (const auto& s : all_sites(levels)) {
      const bool enc = s.rfind("enc", 0) == 0;
      if (variant == BranchVariant::full || (variant == BranchVariant::adapter && enc) ||
          (variant == BranchVariant::controlnet && !enc))
        out.push_back(s);
    }
    return out;
  }
};

inline void init_branch(ParameterStore& ps, const DenoiserConfig& dc, const BranchConfig& bc, std::uint64_t seed) {
  dc.validate();
  const std::size_t C = dc.base_channels, Z = dc.latent_channels;
  if (bc.map_heads == 0 || C % bc.map_heads) throw ConfigError("MAP heads must divide the channel count");
  const auto B = Partition::branch;
  init_conv(ps, "branch.stem", Z, C, 3, seed, B);
  init_conv(ps, "branch.zstem", Z, C, 3, seed, B);
  const bool ref_q = bc.orientation == MapOrientation::reference_as_query;
  for (std::size_t l = 0; l < dc.levels; ++l) {
    const std::string L = std::to_string(l);
    if (l > 0) init_conv(ps, "branch.down" + L, C, C, 3, seed, B);
    init_conv(ps, "branch.block" + L, C, C, 3, seed, B);
    init_linear(ps, "branch.temb" + L, dc.embed_width, 2 * C, seed, B, 0.1);
    const std::size_t q_in = ref_q ? Z : C, kv_in = ref_q ? C : Z;
    ps.add_normal("branch.map" + L + ".LQ", {q_in, C}, 1.0 / std::sqrt(double(q_in)), B, seed);
    ps.add_normal("branch.map" + L + ".LK", {kv_in, C}, 1.0 / std::sqrt(double(kv_in)), B, seed);
    ps.add_normal("branch.map" + L + ".LV", {kv_in, C}, 1.0 / std::sqrt(double(kv_in)), B, seed);
  }
  for (const auto& site : bc.sites(dc.levels)) init_zero_conv(ps, "branch.inj." + site, C, C, B);
}

// ---------------------------------------------------------------------------
// MAP

/// Per-frame shapes of the attention operands in the W*H*V token layout.
struct MapTrace {
  Shape q, k, v;
  Tensor weights;  // [T, heads, distinct queries, distinct keys]
};

/// F_LR: [T*V, C, h, w] layout features; ref: [T, Z, h, w] reference latents.
/// Returns F_LR + softmax(Q K / sqrt(d)) V in the F_LR layout.
///
/// With the reference as query, the V repeated copies of F_ref yield
/// identical query rows, so scores are computed once per distinct query and
/// broadcast; with features as query the repeated keys fold the same way.
inline Var map_attend(Binder& P, const std::string& pre, Var f_lr, Var ref, std::size_t T, MapOrientation orient,
                      std::size_t heads = 1, MapTrace* trace = nullptr) {
  const Shape fs = f_lr.shape(), rs = ref.shape();
  if (fs.size() != 4 || rs.size() != 4) throw ShapeError("MAP expects rank-4 features and reference");
  if (rs[0] != T || fs[0] % T)
    throw ShapeError("MAP: reference has " + std::to_string(rs[0]) + " frames, layout grid expects " +
                     std::to_string(T));
  if (rs[2] != fs[2] || rs[3] != fs[3]) throw ShapeError("MAP: reference and layout resolutions differ");
  const std::size_t V = fs[0] / T, C = fs[1], Z = rs[1], hw = fs[2] * fs[3], WHV = hw * V;
  const bool ref_q = orient == MapOrientation::reference_as_query;
  Var LQ = P(pre + ".LQ"), LK = P(pre + ".LK"), LV = P(pre + ".LV");
  const std::size_t nc = LQ.shape()[1];
  if (LQ.shape()[0] != (ref_q ? Z : C) || LK.shape()[0] != (ref_q ? C : Z))
    throw ShapeError("MAP projection widths do not match the configured orientation");
  if (nc != C) throw ShapeError("MAP width must equal the layout channel count for the residual");
  if (heads == 0 || nc % heads) throw ShapeError("MAP heads must divide N_c");
  const std::size_t d = nc / heads;

  Var lr = reshape(transpose(reshape(f_lr, {T, V, C, hw}), {0, 1, 3, 2}), {T, WHV, C});  // view-major tokens
  Var fref = layernorm(transpose(reshape(ref, {T, Z, hw}), {0, 2, 1}));              // [T, hw, Z]

  const Shape q_shape{WHV, nc}, k_shape{nc, WHV}, v_shape{WHV, nc};
  Var q, k, v;  // distinct rows only
  std::size_t nq, nk;
  if (ref_q) {
    q = matmul(fref, LQ);
    k = matmul(lr, LK);
    v = matmul(lr, LV);
    nq = hw;
    nk = WHV;
  } else {
    q = matmul(lr, LQ);
    k = matmul(fref, LK);
    v = matmul(fref, LV);
    nq = WHV;
    nk = hw;
  }
  // full (repeated) operand shapes, per frame
  const Shape q_full{ref_q ? q.shape()[1] * V : q.shape()[1], q.shape()[2]};
  const Shape k_full{k.shape()[2], ref_q ? k.shape()[1] : k.shape()[1] * V};
  const Shape v_full{ref_q ? v.shape()[1] : v.shape()[1] * V, v.shape()[2]};
  if (q_full != q_shape || k_full != k_shape || v_full != v_shape)
    throw ShapeError("MAP operand shapes violate the Q/K/V contract");

  auto split_heads = [&](Var x, std::size_t n) {
    return reshape(transpose(reshape(x, {T, n, heads, d}), {0, 2, 1, 3}), {T * heads, n, d});
  };
  Var Qh = split_heads(q, nq), Kh = split_heads(k, nk), Vh = split_heads(v, nk);
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  Var O = attention(Qh, Kh, Vh, sc);
  O = reshape(transpose(reshape(O, {T, heads, nq, d}), {0, 2, 1, 3}), {T, nq, nc});
  if (ref_q) O = reshape(broadcast_to(reshape(O, {T, 1, hw, nc}), {T, V, hw, nc}), {T, WHV, nc});
  if (trace) {
    Tensor qf = ref_q ? broadcast_to(reshape(q, {T, 1, hw, nc}), {T, V, hw, nc}).value().reshaped({T, WHV, nc})
                      : q.value();
    trace->q = {qf.dim(1), qf.dim(2)};
    trace->k = k_shape;
    trace->v = v_shape;
    trace->weights =
        softmax(scale(matmul(Qh, transpose(Kh, {0, 2, 1})), sc), -1).value().reshaped({T, heads, nq, nk});
  }
  Var out = add(lr, O);
  return reshape(transpose(reshape(out, {T, V, hw, C}), {0, 1, 3, 2}), fs);
}

// ---------------------------------------------------------------------------
// Branch forward

struct BranchArgs {
  Var layout;                // [T, V, Z, h, w], encoded upsampled coarse views
  Var ref;                   // [T, Z, h, w]
  std::optional<Var> z_t;    // [T, V, Z, h, w] noisy latent
  std::vector<MapTrace>* traces = nullptr;
  double t = 0.0;            // diffusion timestep
};

inline Injections branch_forward(Binder& P, const DenoiserConfig& dc, const BranchConfig& bc, const BranchArgs& in) {
  const Shape ls = in.layout.shape();
  if (ls.size() != 5 || ls[2] != dc.latent_channels) throw ShapeError("layout must be [T, V, Z, h, w]");
  const std::size_t T = ls[0], V = ls[1], Z = ls[2], h = ls[3], w = ls[4];
  if (in.ref.shape() != Shape{T, Z, h, w})
    throw ShapeError("branch reference " + shape_str(in.ref.shape()) + " does not match layout " + shape_str(ls));
  if (h % dc.spatial_multiple() || w % dc.spatial_multiple())
    throw ShapeError("layout resolution incompatible with the branch stem");
  Var x = silu(conv(P, "branch.stem", reshape(in.layout, {T * V, Z, h, w})));
  if (!in.z_t) throw ConfigError("branch needs the noisy latent");
  if (in.z_t->shape() != ls) throw ShapeError("noisy latent " + shape_str(in.z_t->shape()) + " does not match layout");
  x = add(x, conv(P, "branch.zstem", reshape(*in.z_t, {T * V, Z, h, w})));
  Var ref = in.ref;
  Var temb = silu(time_embedding(P, in.t, dc.embed_width));
  std::vector<Var> feats;
  Tape& tape = P.tape();
  for (std::size_t l = 0; l < dc.levels; ++l) {
    const std::string L = std::to_string(l);
    const std::size_t mark = tape.size();
    if (l > 0) {
      x = silu(conv(P, "branch.down" + L, x, 2));
      ref = avgpool2(ref);
    }
    x = add(x, silu(conv(P, "branch.block" + L, x)));
    Var ss = linear_tokens(P, "branch.temb" + L, temb);
    const std::size_t C = x.shape()[1];
    Var sc = add(reshape(slice(ss, 0, 0, C), {1, C, 1, 1}), detail::ones_like_shape(tape, {1, C, 1, 1}));
    x = add(mul(x, sc), reshape(slice(ss, 0, C, C), {1, C, 1, 1}));
    MapTrace tr;
    x = map_attend(P, "branch.map" + L, x, ref, T, bc.orientation, bc.map_heads, in.traces ? &tr : nullptr);
    if (in.traces) in.traces->push_back(std::move(tr));
    if (!tape.recording()) tape.release(mark, {x, ref, temb});
    feats.push_back(x);
  }
  Injections inj;
  for (const auto& site : bc.sites(dc.levels)) {
    if (!P.has("branch.inj." + site + ".w")) throw ConfigError("branch has no projection for site " + site);
    inj.emplace(site, conv(P, "branch.inj." + site, feats.at(site_level(site))));
  }
  return inj;
}

/// Elementwise addition of branch features into mainstream activations.
inline Tensor inject(const Tensor& activations, const Tensor& features) {
  if (activations.shape() != features.shape())
    throw ShapeError("inject: " + shape_str(activations.shape()) + " vs " + shape_str(features.shape()));
  Tensor out = activations;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += features[i];
  return out;
}

}  // namespace c4d
