// SPDX-License-Identifier: Apache-2.0
#pragma once

// Corpus curation: perceptual quality, motion band and completeness
// filters, plus the synthetic corpus used to exercise them.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cascade4d/flow.hpp"
#include "cascade4d/grid.hpp"
#include "cascade4d/manifest.hpp"
#include "cascade4d/perceptual.hpp"
#include "cascade4d/render.hpp"
#include "cascade4d/scorer.hpp"

namespace c4d {

struct FilterConfig {
  double tau_p = 0.35;
  double flow_lo = 0.2;
  double flow_hi = 4.0;
  /// "accept-all", "reject-all" or "exec:<command>".
  std::string scorer = "accept-all";

  void validate() const {
    if (!(tau_p > 0.0)) throw ConfigError("perceptual threshold must be positive");
    if (!(flow_lo > 0.0) || !(flow_hi > flow_lo)) throw ConfigError("flow band needs 0 < lo < hi");
    if (scorer != "accept-all" && scorer != "reject-all" && scorer.rfind("exec:", 0) != 0)
      throw ConfigError("unknown completeness scorer '" + scorer + "'");
  }
};

/// Decides whether the object in a front-view first frame is complete.
using CompletenessScorer = std::function<bool(const Tensor& frame)>;

inline CompletenessScorer make_scorer(const std::string& id) {
  if (id == "accept-all") return [](const Tensor&) { return true; };
  if (id == "reject-all") return [](const Tensor&) { return false; };
  if (id.rfind("exec:", 0) == 0) {
    const std::string cmd = id.substr(5);
    if (cmd.empty()) throw ConfigError("exec scorer needs a command");
    return [cmd](const Tensor& frame) {
      const std::string line = run_scorer(cmd, frame);
      if (line == "accept") return true;
      if (line == "reject") return false;
      throw ScorerError("completeness scorer printed '" + line + "', expected accept or reject");
    };
  }
  throw ConfigError("unknown completeness scorer '" + id + "'");
}

struct FilterReport {
  double perceptual = 0.0;
  double flow_mean = 0.0;
  bool complete = true;
  bool accepted = false;

  bool perceptual_ok(const FilterConfig& c) const { return perceptual <= c.tau_p; }
  bool flow_ok(const FilterConfig& c) const { return flow_mean >= c.flow_lo && flow_mean <= c.flow_hi; }
};

inline std::vector<std::size_t> probe_frames(std::size_t T) {
  std::vector<std::size_t> p{0, T / 2, T - 1};
  p.erase(std::unique(p.begin(), p.end()), p.end());
  return p;
}

/// Mean perceptual distance of the front-view probe frames to their 2x
/// down-up resampled versions.
inline double perceptual_score(const ImageGrid& g) {
  if (g.height() % 2 || g.width() % 2) throw ShapeError("perceptual probe needs even resolution");
  const auto probes = probe_frames(g.frames());
  double s = 0.0;
  for (std::size_t t : probes) {
    const Tensor f = grid_cell(g, t, 0);
    s += perceptual_distance(f, nearest_upsample(box_downsample(f, 2), 2));
  }
  return s / static_cast<double>(probes.size());
}

/// Mean flow magnitude over consecutive front-view frames.
inline double flow_score(const ImageGrid& g, const FlowOptions& o = {}) {
  if (g.frames() < 2) return 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t + 1 < g.frames(); ++t)
    s += estimate_flow(grid_cell(g, t, 0), grid_cell(g, t + 1, 0), o).mean_magnitude();
  return s / static_cast<double>(g.frames() - 1);
}

inline FilterReport filter_sample(const ImageGrid& g, const FilterConfig& c, const CompletenessScorer& scorer) {
  c.validate();
  FilterReport r;
  r.perceptual = perceptual_score(g);
  r.flow_mean = flow_score(g);
  r.complete = scorer(grid_cell(g, 0, 0));
  r.accepted = r.perceptual_ok(c) && r.flow_ok(c) && r.complete;
  return r;
}

inline FilterReport filter_sample(const ImageGrid& g, const FilterConfig& c) {
  return filter_sample(g, c, make_scorer(c.scorer));
}

inline ManifestRecord manifest_record(const std::string& id, const std::vector<std::string>& view_paths,
                                      const ImageGrid& g, const FilterReport& r) {
  return ManifestRecord{id,      view_paths,  g.frames(), g.height(), g.width(), r.perceptual, r.flow_mean,
                        r.complete ? 1.0 : 0.0, r.accepted};
}

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class SampleKind { moderate, static_scene, shaking, noisy, speckled };

inline const char* sample_kind_name(SampleKind k) {
  switch (k) {
    case SampleKind::moderate:
      return "moderate";
    case SampleKind::static_scene:
      return "static";
    case SampleKind::shaking:
      return "shaking";
    case SampleKind::noisy:
      return "noisy";
    case SampleKind::speckled:
      return "speckled";
  }
  return "?";
}

/// Every block of ten samples holds four designed rejects.
inline SampleKind corpus_kind(std::size_t index) {
  switch (index % 10) {
    case 2:
      return SampleKind::static_scene;
    case 5:
      return SampleKind::shaking;
    case 7:
      return SampleKind::noisy;
    case 9:
      return SampleKind::speckled;
    default:
      return SampleKind::moderate;
  }
}

inline SceneSpec moving_scene(std::uint64_t seed) {
  SceneSpec s = SceneSpec::from_seed(seed);
  RngStream r(seed, 0x307E);
  s.motion.rotation_rate = 0.06 + 0.04 * r.uniform();
  s.motion.translation_amplitude = 0.04 + 0.03 * r.uniform();
  s.motion.translation_axis = {1.0, 0.0, 0.0};
  return s;
}

/// Whole-image wrap-around translation of every cell by t * step pixels.
inline ImageGrid shake(const ImageGrid& g, long step) {
  Tensor px = g.pixels;
  const std::size_t T = g.frames(), V = g.views(), H = g.height(), W = g.width();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t base = ((t * V + v) * 3 + c) * H * W;
        const auto shift = static_cast<std::size_t>((long(t) * step) % long(W) + long(W)) % W;
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) px[base + y * W + (x + shift) % W] = g.pixels[base + y * W + x];
      }
  return ImageGrid{std::move(px), g.ring, g.view_ids, g.fps};
}

/// Replaces background pixels (value exactly `background`) by a smooth
/// static texture, giving whole-image motion something to track.
inline ImageGrid add_backdrop(const ImageGrid& g, double background) {
  Tensor px = g.pixels;
  const std::size_t H = g.height(), W = g.width(), cells = g.frames() * g.views();
  for (std::size_t n = 0; n < cells; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t b = n * 3 * H * W + y * W + x;
        if (px[b] != background || px[b + H * W] != background || px[b + 2 * H * W] != background) continue;
        const double X = 64.0 * double(x) / double(W), Y = 64.0 * double(y) / double(H);
        for (std::size_t c = 0; c < 3; ++c)
          px[b + c * H * W] = 0.35 + 0.15 * std::sin(0.4 * X + 0.9 * double(c)) * std::cos(0.3 * Y) +
                              0.1 * std::sin(0.21 * X - 0.33 * Y);
      }
  return ImageGrid{std::move(px), g.ring, g.view_ids, g.fps};
}

inline ImageGrid corrupt(const ImageGrid& g, SampleKind k, std::uint64_t seed) {
  Tensor px = g.pixels;
  CounterRng rng(seed, 0xBAD);
  const std::size_t plane = g.height() * g.width();
  for (std::size_t i = 0; i < px.size(); ++i) {
    // speckles are per channel for noisy samples, shared across channels otherwise
    const std::size_t key = k == SampleKind::noisy ? i : i % plane + (i / (3 * plane)) * 3 * plane;
    if (rng.uniform(2 * key) < 0.7) px[i] = rng.uniform(2 * key + 1) < 0.5 ? 0.0 : 1.0;
  }
  return ImageGrid{std::move(px), g.ring, g.view_ids, g.fps};
}

struct CorpusSample {
  std::string id;
  SampleKind kind;
  SceneSpec scene;
  ImageGrid grid;
};

inline CorpusSample render_corpus_sample(std::size_t index, std::uint64_t seed, std::size_t T, std::size_t V,
                                         std::size_t res) {
  const SampleKind kind = corpus_kind(index);
  const std::uint64_t s = mix_keys(seed, index);
  SceneSpec scene = moving_scene(s);
  if (kind == SampleKind::static_scene || kind == SampleKind::shaking) scene.motion = Motion{};
  CameraRing ring;
  ring.views = V;
  ImageGrid g = render_scene(scene, ring, T, res, res);
  if (kind == SampleKind::shaking) g = shake(add_backdrop(g, scene.background), static_cast<long>(std::max<std::size_t>(1, res * 10 / 64)));
  if (kind == SampleKind::noisy || kind == SampleKind::speckled) g = corrupt(g, kind, s);
  char id[32];
  std::snprintf(id, sizeof id, "sample_%04zu", index);
  return CorpusSample{id, kind, scene, std::move(g)};
}

}  // namespace c4d
