// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-stage generation (coarse dense views, then layout-conditioned
// refinement) and anchored temporal extension.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cascade4d/branch.hpp"
#include "cascade4d/codec.hpp"
#include "cascade4d/denoiser.hpp"
#include "cascade4d/diffusion.hpp"
#include "cascade4d/grid.hpp"

namespace c4d {

struct PipelineConfig {
  std::size_t coarse_res = 32;
  std::size_t fine_res = 64;
  std::size_t window = 5;
  std::size_t views = 16;
  std::size_t subset = 4;
  std::size_t target_length = 21;
  std::size_t anchor_stride = 5;
  SamplerConfig stage1_sampler;
  SamplerConfig stage2_sampler;

  void validate() const {
    if (window < 2) throw ConfigError("window must hold at least 2 frames");
    if ((target_length - 1) % (window - 1)) throw ConfigError("target length - 1 must be divisible by window - 1");
    if (subset == 0 || subset > views) throw ConfigError("view subset size must be in [1, V]");
    if (coarse_res == 0 || fine_res % coarse_res) throw ConfigError("fine resolution must be a multiple of coarse");
    if (anchor_stride == 0 || (target_length - 1) % anchor_stride)
      throw ConfigError("anchor stride must divide target length - 1");
    if ((target_length - 1) / anchor_stride + 1 != window)
      throw ConfigError("anchor count must equal the window length");
    if (anchor_stride > window) throw ConfigError("anchor windows would leave frames uncovered");
  }

  std::size_t upscale() const { return fine_res / coarse_res; }
};

/// Everything a stage model sees besides (z_t, t).
struct StageContext {
  int stage = 1;
  Tensor cf;      // [T, Z, h, w]
  Tensor cv;      // [V, Z, h, w]
  Tensor layout;  // stage 2: [T, V, Z, h, w]
  std::vector<double> azimuths;
  std::vector<double> frame_pos;
  std::vector<std::size_t> frame_ids;  // absolute frame indices
  std::vector<std::size_t> view_ids;
  const NoiseSchedule* schedule = nullptr;
};

using StageModel = std::function<Tensor(const Tensor& z_t, std::size_t t, const StageContext&)>;

/// Stage 1: base + LORA.
inline StageModel denoiser_model(const ParameterStore& ps, const DenoiserConfig& dc, bool use_lora) {
  return [&ps, dc, use_lora](const Tensor& z_t, std::size_t t, const StageContext& c) {
    Tape tape(false);
    Binder P(tape, ps);
    DenoiseArgs a{tape.constant(z_t), tape.constant(c.cf), tape.constant(c.cv), static_cast<double>(t),
                  c.azimuths,         c.frame_pos,        nullptr,           use_lora};
    if (c.schedule) a.alpha_bar = c.schedule->alpha_bar(t);
    return denoise(P, dc, a).value();
  };
}

/// Stage 2: frozen base plus branch injections.
inline StageModel branch_model(const ParameterStore& ps, const DenoiserConfig& dc, const BranchConfig& bc) {
  return [&ps, dc, bc](const Tensor& z_t, std::size_t t, const StageContext& c) {
    Tape tape(false);
    Binder P(tape, ps);
    Var z = tape.constant(z_t);
    BranchArgs ba{tape.constant(c.layout), tape.constant(c.cf), std::nullopt, nullptr};
    ba.z_t = z;
    ba.t = static_cast<double>(t);
    Injections inj = branch_forward(P, dc, bc, ba);
    DenoiseArgs a{z, tape.constant(c.cf), tape.constant(c.cv), static_cast<double>(t), c.azimuths, c.frame_pos,
                  &inj, false};
    if (c.schedule) a.alpha_bar = c.schedule->alpha_bar(t);
    return denoise(P, dc, a).value();
  };
}

/// Plug-in that returns the exact noise for known clean latents, looked up
/// per (stage, frame ids, view ids).
using TruthLookup = std::function<Tensor(const StageContext&)>;

inline StageModel oracle_model(const NoiseSchedule& s, TruthLookup truth) {
  return [s, truth](const Tensor& z_t, std::size_t t, const StageContext& c) {
    const Tensor z0 = truth(c);
    if (z0.shape() != z_t.shape()) throw ShapeError("oracle truth shape mismatch");
    const double a = s.sqrt_alpha_bar(t), b = s.sqrt_one_minus(t);
    Tensor e(z_t.shape());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = (z_t[i] - a * z0[i]) / b;
    return e;
  };
}

struct StageStats {
  double seconds = 0.0;
  std::size_t evaluations = 0;
};

struct Cascade {
  PipelineConfig config;
  CodecSpec codec;
  NoiseSchedule schedule;
  StageModel stage1;
  StageModel stage2;
  StageStats stats1, stats2;

  /// ref_video: T x 1 grid at fine resolution; ref_views: 1 x V at fine
  /// resolution. Returns the coarse T x V grid.
  ImageGrid run_stage1(const ImageGrid& ref_video, const ImageGrid& ref_views, std::uint64_t seed,
                       const std::vector<std::size_t>& frame_ids = {}) {
    check_inputs(ref_video, ref_views);
    const std::size_t T = ref_video.frames(), V = ref_views.views();
    const std::size_t f = ref_video.height() / config.coarse_res;
    StageContext c;
    c.schedule = &schedule;
    c.stage = 1;
    c.cf = encode_frames(box_downsample(view_sequence(ref_video, 0), f), codec);
    c.cv = encode_frames(box_downsample(frame_sequence(ref_views, 0), f), codec);
    fill_context(c, ref_views, T, frame_ids);
    const Shape zs{T, V, codec.channels(), c.cf.dim(2), c.cf.dim(3)};
    const Tensor z = run_sampler(stage1, c, zs, config.stage1_sampler, mix_keys(seed, 1), stats1);
    return decode(LatentGrid{z, ref_views.view_ids}, codec, ref_views.ring, ref_video.fps);
  }

  /// Refines `views` (all by default) of a coarse grid. Training mode
  /// requires exactly the configured subset size.
  ImageGrid run_stage2(const ImageGrid& coarse, const ImageGrid& ref_video, const ImageGrid& ref_views,
                       std::uint64_t seed, std::optional<std::vector<std::size_t>> views = std::nullopt,
                       bool training = false, const std::vector<std::size_t>& frame_ids = {}) {
    check_inputs(ref_video, ref_views);
    if (coarse.views() != ref_views.views()) throw ShapeError("coarse grid and reference views disagree on V");
    if (coarse.frames() != ref_video.frames()) throw ShapeError("coarse grid and reference video disagree on T");
    if (coarse.height() * config.upscale() != ref_video.height())
      throw ShapeError("coarse grid is not at the coarse resolution");
    std::vector<std::size_t> idx;
    if (views) {
      idx = *views;
    } else {
      for (std::size_t v = 0; v < coarse.views(); ++v) idx.push_back(v);
    }
    if (training && idx.size() != config.subset)
      throw ConfigError("training mode needs exactly " + std::to_string(config.subset) + " views, got " +
                        std::to_string(idx.size()));
    const ImageGrid sub = slice_views(coarse, idx);
    const ImageGrid sub_views = slice_views(ref_views, idx);
    const std::size_t T = sub.frames(), V = sub.views();
    StageContext c;
    c.schedule = &schedule;
    c.stage = 2;
    c.layout = encode(upsample_grid(sub, config.upscale()), codec).values;
    c.cf = encode_frames(view_sequence(ref_video, 0), codec);
    c.cv = encode_frames(frame_sequence(sub_views, 0), codec);
    fill_context(c, sub_views, T, frame_ids);
    const Shape zs{T, V, codec.channels(), c.cf.dim(2), c.cf.dim(3)};
    const Tensor z = run_sampler(stage2, c, zs, config.stage2_sampler, mix_keys(seed, 2), stats2);
    return decode(LatentGrid{z, sub.view_ids}, codec, coarse.ring, coarse.fps);
  }

  ImageGrid run(const ImageGrid& ref_video, const ImageGrid& ref_views, std::uint64_t seed,
                const std::vector<std::size_t>& frame_ids = {}) {
    const ImageGrid coarse = run_stage1(ref_video, ref_views, seed, frame_ids);
    return run_stage2(coarse, ref_video, ref_views, seed, std::nullopt, false, frame_ids);
  }

  /// Anchored extension of a target-length monocular video to all views.
  /// Pass 1 generates the strided anchor frames; pass 2 fills each
  /// half-open window [a, a + window) with the views generated at frame a
  /// as reference views. Anchor frames keep their pass-1 values.
  ImageGrid extend_anchored(const ImageGrid& full_ref_video, const ImageGrid& ref_views, std::uint64_t seed) {
    config.validate();
    const std::size_t L = config.target_length, S = config.anchor_stride, W = config.window;
    if (full_ref_video.frames() != L)
      throw ShapeError("extension needs a " + std::to_string(L) + "-frame video, got " +
                       std::to_string(full_ref_video.frames()));
    std::vector<std::size_t> anchors;
    for (std::size_t a = 0; a < L; a += S) anchors.push_back(a);
    const ImageGrid anchor_grid = run(slice_frames(full_ref_video, anchors), ref_views, seed, anchors);

    const std::size_t V = anchor_grid.views(), H = anchor_grid.height(), Wd = anchor_grid.width();
    const std::size_t cell = 3 * H * Wd;
    Tensor out({L, V, 3, H, Wd});
    std::vector<bool> filled(L, false);
    auto put = [&](const ImageGrid& g, std::size_t src_t, std::size_t dst_t) {
      std::copy_n(g.pixels.data().begin() + src_t * V * cell, V * cell, out.data().begin() + dst_t * V * cell);
      filled[dst_t] = true;
    };
    for (std::size_t k = 0; k < anchors.size(); ++k) put(anchor_grid, k, anchors[k]);

    for (std::size_t k = 0; k + 1 < anchors.size(); ++k) {
      const std::size_t a = anchors[k];
      std::vector<std::size_t> frames;
      for (std::size_t t = a; t < a + W && t < L; ++t) frames.push_back(t);
      if (frames.size() != W) throw ConfigError("window runs past the video end");
      const ImageGrid views_at_a = slice_frames(anchor_grid, {k});
      const ImageGrid win = run(slice_frames(full_ref_video, frames), views_at_a, mix_keys(seed, 100 + k), frames);
      for (std::size_t j = 0; j < frames.size(); ++j)
        if (!filled[frames[j]]) put(win, j, frames[j]);
    }
    for (std::size_t t = 0; t < L; ++t)
      if (!filled[t]) throw ConfigError("frame " + std::to_string(t) + " not covered by any window");
    return ImageGrid{std::move(out), anchor_grid.ring, anchor_grid.view_ids, full_ref_video.fps};
  }

 private:
  void check_inputs(const ImageGrid& ref_video, const ImageGrid& ref_views) const {
    if (ref_video.views() != 1) throw ShapeError("reference video must be a single-view grid");
    if (ref_views.frames() != 1) throw ShapeError("reference views must be a single-frame grid");
    if (ref_video.height() != config.fine_res || ref_video.width() != config.fine_res ||
        ref_views.height() != config.fine_res || ref_views.width() != config.fine_res)
      throw ShapeError("reference inputs must be at the fine resolution " + std::to_string(config.fine_res));
  }

  static void fill_context(StageContext& c, const ImageGrid& views, std::size_t T,
                           const std::vector<std::size_t>& frame_ids) {
    c.azimuths = views.azimuths();
    c.view_ids = views.view_ids;
    c.frame_pos = default_frame_positions(T);
    c.frame_ids = frame_ids;
    if (c.frame_ids.empty())
      for (std::size_t t = 0; t < T; ++t) c.frame_ids.push_back(t);
    if (c.frame_ids.size() != T) throw ShapeError("frame id count mismatch");
  }

  Tensor run_sampler(const StageModel& model, const StageContext& c, const Shape& zs, const SamplerConfig& sc,
                     std::uint64_t seed, StageStats& st) {
    if (!model) throw ConfigError("stage model not configured");
    const auto t0 = std::chrono::steady_clock::now();
    EpsFn fn = [&](const Tensor& z, std::size_t t) { return model(z, t, c); };
    Tensor z = ddim_sample(fn, initial_noise(zs, seed), schedule, sc, &st.evaluations);
    st.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return z;
  }
};

struct RunReport {
  std::uint64_t seed = 0;
  std::string config_hash;
  StageStats stage1, stage2;
  std::vector<std::pair<std::string, std::string>> extra;

  std::string text() const {
    std::ostringstream os;
    os << "seed\t" << seed << "\n";
    os << "config_hash\t" << config_hash << "\n";
    os << "stage1_seconds\t" << stage1.seconds << "\n";
    os << "stage1_evaluations\t" << stage1.evaluations << "\n";
    os << "stage2_seconds\t" << stage2.seconds << "\n";
    os << "stage2_evaluations\t" << stage2.evaluations << "\n";
    for (const auto& [k, v] : extra) os << k << "\t" << v << "\n";
    return os.str();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << text();
  }
};

/// Uniformly random distinct view indices, sorted.
inline std::vector<std::size_t> sample_training_views(std::size_t V, std::size_t k, RngStream& rng) {
  if (k > V) throw ConfigError("subset larger than view count");
  std::vector<std::size_t> pool(V);
  for (std::size_t i = 0; i < V; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(V - i)]);
  std::vector<std::size_t> out(pool.begin(), pool.begin() + static_cast<long>(k));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace c4d
