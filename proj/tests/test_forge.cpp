// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cascade4d/forge.hpp"

using namespace c4d;

namespace {

/// Smooth multi-frequency texture translated by (sx, sy).
Tensor texture(double sx, double sy, std::size_t n = 64) {
  Tensor f({3, n, n});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double X = double(x) - sx, Y = double(y) - sy;
        f[(c * n + y) * n + x] = 0.5 + 0.2 * std::sin(0.31 * X + 0.7 * double(c)) * std::cos(0.23 * Y) +
                                 0.15 * std::sin(0.17 * X + 0.29 * Y + 1.0);
      }
  return f;
}

Tensor with_noise(const Tensor& x, double amp, std::uint64_t seed) {
  Tensor y = x;
  CounterRng r(seed, 3);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += amp * (2.0 * r.uniform(i) - 1.0);
  return y;
}

std::filesystem::path script(const std::string& name, const std::string& body) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << "#!/bin/sh\n" << body << "\n";
  std::filesystem::permissions(p, std::filesystem::perms::owner_all);
  return p;
}

}  // namespace

TEST(Perceptual, IdentityAndSymmetry) {
  const Tensor a = texture(0, 0), b = with_noise(a, 0.2, 1);
  EXPECT_EQ(perceptual_distance(a, a), 0.0);
  EXPECT_GT(perceptual_distance(a, b), 0.0);
  EXPECT_NEAR(perceptual_distance(a, b), perceptual_distance(b, a), 1e-12);
  Tensor c = a;
  c[100] += 1e-9;
  EXPECT_GT(perceptual_distance(a, c), 0.0);
  EXPECT_THROW(perceptual_distance(a, texture(0, 0, 32)), ShapeError);
}

TEST(Perceptual, MonotoneInNoiseAmplitude) {
  const Tensor x = texture(0, 0);
  int ok = 0;
  for (std::uint64_t s = 0; s < 100; ++s)
    ok += perceptual_distance(x, with_noise(x, 0.5, s)) > perceptual_distance(x, with_noise(x, 0.1, s + 1000));
  EXPECT_GE(ok, 95);
}

TEST(Flow, IdenticalFramesGiveZeroField) {
  const FlowField f = estimate_flow(texture(0, 0), texture(0, 0));
  EXPECT_EQ(f.mean_magnitude(), 0.0);
  const FlowField z = estimate_flow(Tensor({3, 32, 32}, 0.4), Tensor({3, 32, 32}, 0.7));
  EXPECT_EQ(z.mean_magnitude(), 0.0);
  EXPECT_THROW(estimate_flow(texture(0, 0), texture(0, 0, 32)), ShapeError);
}

TEST(Flow, RecoversTranslations) {
  for (double sx : {-4.0, -2.0, 0.0, 1.0, 2.0, 3.0, 4.0})
    for (double sy : {-3.0, 0.0, 2.0}) {
      const FlowField f = estimate_flow(texture(0, 0), texture(sx, sy));
      double u = 0, v = 0, n = 0;
      for (std::size_t y = 12; y < 52; ++y)
        for (std::size_t x = 12; x < 52; ++x) {
          u += f.u[y * 64 + x];
          v += f.v[y * 64 + x];
          ++n;
        }
      EXPECT_NEAR(u / n, sx, 0.5) << sx << "," << sy;
      EXPECT_NEAR(v / n, sy, 0.5) << sx << "," << sy;
    }
}

TEST(Flow, MovingBoxConcentratesOnObject) {
  SceneSpec s = SceneSpec::from_seed(3);
  s.primitive = Primitive::box;
  s.motion.translation_amplitude = 0.08;
  CameraRing ring;
  ring.views = 2;
  const ImageGrid g = render_scene(s, ring, 3, 64, 64);
  const FlowField f = estimate_flow(grid_cell(g, 0, 0), grid_cell(g, 1, 0));
  const Tensor m0 = render_coverage(s, ring, 0, 0, 64, 64), m1 = render_coverage(s, ring, 1, 0, 64, 64);
  double in = 0, out = 0, nin = 0, nout = 0;
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    const double mag = std::hypot(f.u[i], f.v[i]);
    if (m0[i] > 0 || m1[i] > 0) {
      in += mag;
      ++nin;
    } else {
      out += mag;
      ++nout;
    }
  }
  ASSERT_GT(nin, 0);
  ASSERT_GT(nout, 0);
  EXPECT_GT(in / nin, 4.0 * (out / nout));
}

TEST(Filter, ConfigValidation) {
  FilterConfig c;
  EXPECT_NO_THROW(c.validate());
  c.flow_lo = 5.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = FilterConfig{};
  c.scorer = "oracle";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Filter, DesignedCorpusYieldsSixAccepts) {
  std::size_t accepted = 0;
  const FilterConfig cfg;
  for (std::size_t i = 0; i < 10; ++i) {
    const CorpusSample s = render_corpus_sample(i, 1234, 5, 2, 64);
    const FilterReport r = filter_sample(s.grid, cfg);
    accepted += r.accepted;
    EXPECT_EQ(r.accepted, r.perceptual_ok(cfg) && r.flow_ok(cfg) && r.complete);
    switch (s.kind) {
      case SampleKind::moderate:
        EXPECT_TRUE(r.accepted) << s.id << " p=" << r.perceptual << " flow=" << r.flow_mean;
        break;
      case SampleKind::static_scene:
        EXPECT_LT(r.flow_mean, cfg.flow_lo) << s.id;
        break;
      case SampleKind::shaking:
        EXPECT_GT(r.flow_mean, cfg.flow_hi) << s.id;
        break;
      case SampleKind::noisy:
      case SampleKind::speckled:
        EXPECT_GT(r.perceptual, cfg.tau_p) << s.id;
        break;
    }
  }
  EXPECT_EQ(accepted, 6u);
}

TEST(Filter, ExcessiveWholeImageMotionRejected) {
  const CorpusSample s = render_corpus_sample(0, 99, 4, 2, 64);
  const FilterReport r = filter_sample(shake(add_backdrop(s.grid, s.scene.background), 10), FilterConfig{});
  EXPECT_GT(r.flow_mean, 4.0);
  EXPECT_FALSE(r.accepted);
}

TEST(Filter, PureFunctionOfInputs) {
  const CorpusSample s = render_corpus_sample(3, 5, 5, 2, 32);
  const FilterReport a = filter_sample(s.grid, FilterConfig{}), b = filter_sample(s.grid, FilterConfig{});
  EXPECT_EQ(a.perceptual, b.perceptual);
  EXPECT_EQ(a.flow_mean, b.flow_mean);
}

TEST(Scorer, ExternalCommandProtocol) {
  const CorpusSample s = render_corpus_sample(0, 1234, 5, 2, 32);
  FilterConfig c;
  c.scorer = "exec:" + script("c4d_accept.sh", "echo accept").string();
  EXPECT_TRUE(filter_sample(s.grid, c).complete);
  c.scorer = "exec:" + script("c4d_reject.sh", "echo reject").string();
  const FilterReport r = filter_sample(s.grid, c);
  EXPECT_FALSE(r.complete);
  EXPECT_FALSE(r.accepted);
  c.scorer = "exec:" + script("c4d_bad.sh", "echo maybe").string();
  EXPECT_THROW(filter_sample(s.grid, c), ScorerError);
  c.scorer = "exec:" + script("c4d_fail.sh", "exit 3").string();
  EXPECT_THROW(filter_sample(s.grid, c), ScorerError);
  // the scorer sees a readable P6 image
  c.scorer = "exec:" + script("c4d_head.sh", "head -c 2 \"$1\" | grep -q P6 && echo accept || echo reject").string();
  EXPECT_TRUE(filter_sample(s.grid, c).complete);
}

TEST(Manifest, BuildFromReports) {
  Manifest m;
  const FilterConfig cfg;
  for (std::size_t i = 0; i < 10; ++i) {
    const CorpusSample s = render_corpus_sample(i, 1234, 5, 2, 64);
    m.records.push_back(manifest_record(s.id, {s.id + "/view_00.c4dv", s.id + "/view_01.c4dv"}, s.grid,
                                        filter_sample(s.grid, cfg)));
  }
  EXPECT_EQ(m.accepted_count(), 6u);
  std::stringstream ss;
  write_manifest(m, ss);
  EXPECT_EQ(read_manifest(ss), m);
}
