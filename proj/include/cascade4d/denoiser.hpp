// SPDX-License-Identifier: Apache-2.0
#pragma once

// UNet-style eps predictor over latent grids. Every level runs
// resblock -> spatial attention -> frame attention -> view attention.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cascade4d/autodiff.hpp"
#include "cascade4d/layers.hpp"
#include "cascade4d/params.hpp"

namespace c4d {

/// Network output meaning: the noise itself, or v = sqrt(abar) eps -
/// sqrt(1 - abar) z0, converted to eps inside denoise().
enum class Prediction { eps, v };

inline Prediction parse_prediction(const std::string& s) {
  if (s == "eps") return Prediction::eps;
  if (s == "v") return Prediction::v;
  throw ConfigError("unknown prediction target '" + s + "'");
}

inline const char* prediction_name(Prediction p) { return p == Prediction::eps ? "eps" : "v"; }

struct DenoiserConfig {
  std::size_t latent_channels = 48;
  std::size_t base_channels = 32;
  std::size_t levels = 2;
  std::size_t heads = 4;
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  std::size_t embed_width = 64;
  std::size_t groups = 8;
  /// Init scale of the last layer of every residual branch.
  double residual_gain = 0.2;
  Prediction prediction = Prediction::v;

  void validate() const {
    if (base_channels == 0 || heads == 0 || base_channels % heads)
      throw ConfigError("base channels must be divisible by the head count");
    if (groups == 0 || base_channels % groups) throw ConfigError("base channels must be divisible by groups");
    if (levels == 0) throw ConfigError("denoiser needs at least one level");
    if (embed_width < 2 || embed_width % 2) throw ConfigError("embedding width must be even");
    if (latent_channels == 0) throw ConfigError("latent channels must be positive");
  }

  /// Latent extents must survive levels-1 halvings.
  std::size_t spatial_multiple() const { return std::size_t{1} << (levels - 1); }
};

/// Site names receiving additive features, in forward order.
inline std::vector<std::string> all_sites(std::size_t levels) {
  std::vector<std::string> s;
  for (std::size_t l = 0; l < levels; ++l) s.push_back("enc" + std::to_string(l));
  for (std::size_t l = levels; l-- > 0;) s.push_back("dec" + std::to_string(l));
  return s;
}

inline std::size_t site_level(const std::string& site) { return std::stoul(site.substr(3)); }

/// Site -> features [T*V, Cb, h_l, w_l].
using Injections = std::map<std::string, Var>;

inline void init_denoiser(ParameterStore& ps, const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t C = cfg.base_channels, E = cfg.embed_width, Z = cfg.latent_channels;
  init_conv(ps, "conv_in", Z, C, 1, seed);
  init_linear(ps, "temb.l1", E, E, seed);
  init_linear(ps, "temb.l2", E, E, seed);
  auto block = [&](const std::string& pre) {
    init_conv(ps, pre + ".res.conv1", C, C, 3, seed);
    init_linear(ps, pre + ".res.temb", E, 2 * C, seed, Partition::base, 0.1);
    init_conv(ps, pre + ".res.conv2", C, C, 3, seed, Partition::base, cfg.residual_gain);
    init_attention(ps, pre + ".spatial", C, cfg.lora_rank, seed, cfg.residual_gain);
    init_attention(ps, pre + ".frame", C, cfg.lora_rank, seed, cfg.residual_gain);
    init_attention(ps, pre + ".view", C, cfg.lora_rank, seed, cfg.residual_gain);
    init_linear(ps, pre + ".view.camera", 2, C, seed);
  };
  for (const auto& site : all_sites(cfg.levels)) block(site);
  init_conv(ps, "conv_out", C, Z, 1, seed);
}

// ---------------------------------------------------------------------------
// Blocks

namespace detail {

inline Var ones_like_shape(Tape& t, const Shape& s) { return t.constant(Tensor(s, 1.0)); }

}  // namespace detail

inline Var time_embedding(Binder& P, double t, std::size_t width) {
  Var e = P.tape().constant(sinusoid(t, width));
  return linear_tokens(P, "temb.l2", silu(linear_tokens(P, "temb.l1", e)));
}

/// h: [N, C, h, w], temb: [E].
inline Var res_block(Binder& P, const std::string& pre, Var h, Var temb, std::size_t groups) {
  const std::size_t C = h.shape()[1];
  Var a = conv(P, pre + ".conv1", silu(groupnorm(h, groups)));
  Var ss = linear_tokens(P, pre + ".temb", silu(temb));
  Var sc = reshape(slice(ss, 0, 0, C), {1, C, 1, 1});
  Var sh = reshape(slice(ss, 0, C, C), {1, C, 1, 1});
  sc = add(sc, detail::ones_like_shape(P.tape(), {1, C, 1, 1}));
  a = add(mul(groupnorm(a, groups), sc), sh);
  a = conv(P, pre + ".conv2", silu(a));
  return add(h, a);
}

/// Self-attention over the h*w tokens of every cell. h: [N, C, h, w].
/// `positional` off is only useful for equivariance checks.
inline Var spatial_attention(Binder& P, const std::string& pre, Var h, const AttentionSpec& a,
                             bool positional = true) {
  const Shape s = h.shape();
  const std::size_t N = s[0], C = s[1], hw = s[2] * s[3];
  Var tok = transpose(reshape(h, {N, C, hw}), {0, 2, 1});
  Var x = layernorm(tok);
  if (positional) x = add(x, P.tape().constant(sinusoid_2d(s[2], s[3], C)));
  Var out = add(tok, multi_head_attention(P, pre, x, x, a));
  return reshape(transpose(out, {0, 2, 1}), s);
}

/// Attention along frames for every (view, position). h: [T*V, C, h, w],
/// cf: [T, C, h, w]. Keys/values are the T grid tokens plus the T
/// reference-video tokens, each tagged with its frame embedding.
inline Var frame_attention(Binder& P, const std::string& pre, Var h, Var cf, std::size_t T,
                           const std::vector<double>& frame_pos, const AttentionSpec& a) {
  const Shape s = h.shape();
  const std::size_t C = s[1], hw = s[2] * s[3], V = s[0] / T;
  if (cf.shape()[0] != T) throw ShapeError("frame attention: reference video has " + std::to_string(cf.shape()[0]) +
                                           " frames, grid has " + std::to_string(T));
  if (frame_pos.size() != T) throw ShapeError("frame attention: frame position count mismatch");
  Tensor fe({T, C});
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor e = sinusoid(frame_pos[t], C, 100.0);
    std::copy(e.data().begin(), e.data().end(), fe.data().begin() + t * C);
  }
  Var fev = P.tape().constant(std::move(fe));
  // [T, V, C, hw] -> [V, hw, T, C]
  Var tok = reshape(transpose(reshape(h, {T, V, C, hw}), {1, 3, 0, 2}), {V * hw, T, C});
  Var ref = transpose(reshape(cf, {T, C, hw}), {2, 0, 1});  // [hw, T, C]
  ref = reshape(broadcast_to(reshape(ref, {1, hw, T, C}), {V, hw, T, C}), {V * hw, T, C});
  Var q = add(layernorm(tok), fev);
  Var kv = concat({q, add(layernorm(ref), fev)}, 1);
  Var out = add(tok, multi_head_attention(P, pre, q, kv, a));
  return reshape(transpose(reshape(out, {V, hw, T, C}), {2, 0, 3, 1}), s);
}

/// Attention along views for every (frame, position). cv: [V, C, h, w].
/// A learned projection of (sin az, cos az) tags each view token and the
/// matching reference-view token.
inline Var view_attention(Binder& P, const std::string& pre, Var h, Var cv, std::size_t T,
                          const std::vector<double>& azimuths, const AttentionSpec& a) {
  const Shape s = h.shape();
  const std::size_t C = s[1], hw = s[2] * s[3], V = s[0] / T;
  if (cv.shape()[0] != V)
    throw ShapeError("view attention: " + std::to_string(cv.shape()[0]) + " reference views for " +
                     std::to_string(V) + " grid views");
  if (azimuths.size() != V) throw ShapeError("view attention: azimuth count mismatch");
  Tensor ang({V, 2});
  for (std::size_t v = 0; v < V; ++v) {
    ang[2 * v] = std::sin(azimuths[v]);
    ang[2 * v + 1] = std::cos(azimuths[v]);
  }
  Var cam = linear_tokens(P, pre + ".camera", P.tape().constant(std::move(ang)));  // [V, C]
  Var tok = reshape(transpose(reshape(h, {T, V, C, hw}), {0, 3, 1, 2}), {T * hw, V, C});
  Var ref = transpose(reshape(cv, {V, C, hw}), {2, 0, 1});  // [hw, V, C]
  ref = reshape(broadcast_to(reshape(ref, {1, hw, V, C}), {T, hw, V, C}), {T * hw, V, C});
  Var q = add(layernorm(tok), cam);
  Var kv = concat({q, add(layernorm(ref), cam)}, 1);
  Var out = add(tok, multi_head_attention(P, pre, q, kv, a));
  return reshape(transpose(reshape(out, {T, hw, V, C}), {0, 2, 3, 1}), s);
}

// ---------------------------------------------------------------------------
// Full network

struct DenoiseArgs {
  Var z;   // [T, V, Z, h, w]
  Var cf;  // [T, Z, h, w]
  Var cv;  // [V, Z, h, w]
  double t = 0.0;
  std::vector<double> azimuths;   // V entries
  std::vector<double> frame_pos;  // T entries
  const Injections* injections = nullptr;
  bool use_lora = false;
  /// Required for v prediction.
  double alpha_bar = -1.0;
};

inline Var denoise(Binder& P, const DenoiserConfig& cfg, const DenoiseArgs& in) {
  const Shape zs = in.z.shape();
  if (zs.size() != 5 || zs[2] != cfg.latent_channels)
    throw ShapeError("denoise expects [T, V, " + std::to_string(cfg.latent_channels) + ", h, w], got " +
                     shape_str(zs));
  const std::size_t T = zs[0], V = zs[1], Z = zs[2], hh = zs[3], ww = zs[4];
  const std::size_t mult = cfg.spatial_multiple();
  if (hh % mult || ww % mult) throw ShapeError("latent extents must be divisible by " + std::to_string(mult));
  if (in.cf.shape() != Shape{T, Z, hh, ww})
    throw ShapeError("reference video latent " + shape_str(in.cf.shape()) + " does not match grid " + shape_str(zs));
  if (in.cv.shape() != Shape{V, Z, hh, ww})
    throw ShapeError("reference view latent " + shape_str(in.cv.shape()) + " does not match grid " + shape_str(zs));
  const AttentionSpec att{cfg.heads, in.use_lora ? cfg.lora_scale : 0.0};
  if (cfg.prediction == Prediction::v && !(in.alpha_bar >= 0.0 && in.alpha_bar <= 1.0))
    throw ConfigError("v prediction needs alpha_bar in [0, 1]");

  Var temb = time_embedding(P, in.t, cfg.embed_width);
  Var h = conv(P, "conv_in", reshape(in.z, {T * V, Z, hh, ww}));
  Var hf = conv(P, "conv_in", in.cf);
  Var hv = conv(P, "conv_in", in.cv);

  Tape& tape = P.tape();
  auto block = [&](const std::string& site, Var x, Var f, Var v) {
    const std::size_t mark = tape.size();
    x = res_block(P, site + ".res", x, temb, cfg.groups);
    x = spatial_attention(P, site + ".spatial", x, att);
    x = frame_attention(P, site + ".frame", x, f, T, in.frame_pos, att);
    x = view_attention(P, site + ".view", x, v, T, in.azimuths, att);
    if (in.injections) {
      auto it = in.injections->find(site);
      if (it != in.injections->end()) {
        if (it->second.shape() != x.shape())
          throw ShapeError("injection at " + site + " has shape " + shape_str(it->second.shape()) + ", site is " +
                           shape_str(x.shape()));
        x = add(x, it->second);
      }
    }
    if (!tape.recording()) tape.release(mark, {x});
    return x;
  };

  std::vector<Var> skips, fs, vs;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    if (l > 0) {
      h = avgpool2(h);
      hf = avgpool2(hf);
      hv = avgpool2(hv);
    }
    h = block("enc" + std::to_string(l), h, hf, hv);
    skips.push_back(h);
    fs.push_back(hf);
    vs.push_back(hv);
  }
  for (std::size_t l = cfg.levels; l-- > 0;) {
    if (l + 1 < cfg.levels) h = add(upsample2(h), skips[l]);
    h = block("dec" + std::to_string(l), h, fs[l], vs[l]);
  }
  Var out = reshape(conv(P, "conv_out", silu(groupnorm(h, cfg.groups))), zs);
  if (cfg.prediction == Prediction::eps) return out;
  // eps = sqrt(abar) v + sqrt(1 - abar) z_t
  return add(scale(out, std::sqrt(in.alpha_bar)), scale(in.z, std::sqrt(1.0 - in.alpha_bar)));
}

}  // namespace c4d
