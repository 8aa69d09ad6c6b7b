// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "cascade4d/cascade.hpp"
#include "cascade4d/render.hpp"

using namespace c4d;

namespace {

struct World {
  PipelineConfig pc;
  CodecSpec codec{4, 7};
  ImageGrid fine;    // T x V at fine resolution
  ImageGrid coarse;  // T x V at coarse resolution
  LatentGrid fine_z, coarse_z;

  World(std::size_t T, std::size_t V, std::size_t coarse_res, std::size_t fine_res) {
    pc.views = V;
    pc.subset = std::min<std::size_t>(pc.subset, V);
    pc.coarse_res = coarse_res;
    pc.fine_res = fine_res;
    SceneSpec s = SceneSpec::from_seed(21);
    s.motion.rotation_rate = 0.1;
    CameraRing ring;
    ring.views = V;
    fine = render_scene(s, ring, T, fine_res, fine_res);
    coarse = downsample_grid(fine, fine_res / coarse_res);
    fine_z = encode(fine, codec);
    coarse_z = encode(coarse, codec);
  }

  ImageGrid ref_video(const std::vector<std::size_t>& frames) const { return slice_views(slice_frames(fine, frames), {0}); }
  ImageGrid ref_views() const { return slice_frames(fine, {0}); }

  Cascade oracle_cascade() const {
    Cascade c{pc, codec, NoiseSchedule(50), {}, {}, {}, {}};
    c.config.stage1_sampler = c.config.stage2_sampler = SamplerConfig{};
    const LatentGrid cz = coarse_z, fz = fine_z;
    auto lookup = [cz, fz](const StageContext& ctx) {
      const LatentGrid& g = ctx.stage == 1 ? cz : fz;
      return detail::take(slice_views(g, ctx.view_ids).values, 0, ctx.frame_ids);
    };
    c.stage1 = oracle_model(c.schedule, lookup);
    c.stage2 = oracle_model(c.schedule, lookup);
    return c;
  }
};

}  // namespace

TEST(PipelineConfig, Invariants) {
  PipelineConfig c;
  EXPECT_NO_THROW(c.validate());
  c.target_length = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.subset = 17;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.anchor_stride = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

DenoiserConfig small_denoiser(std::size_t Z) {
  DenoiserConfig dc;
  dc.latent_channels = Z;
  dc.base_channels = 8;
  dc.heads = 2;
  dc.groups = 2;
  dc.embed_width = 8;
  dc.lora_rank = 2;
  return dc;
}

TEST(Cascade, OracleStage1DefaultsReproduceTarget) {
  World w(5, 16, 32, 64);
  Cascade c = w.oracle_cascade();
  const ImageGrid out = c.run_stage1(w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 3);
  EXPECT_EQ(out.pixels.shape(), (Shape{5, 16, 3, 32, 32}));
  EXPECT_LT(max_abs_diff(out.pixels, w.coarse.pixels), 1e-6);
  EXPECT_EQ(c.stats1.evaluations, 10u);
}

TEST(Cascade, OracleStage2AllViewsAndSubsets) {
  World w(5, 16, 8, 16);
  Cascade c = w.oracle_cascade();
  const ImageGrid out = c.run_stage2(w.coarse, w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 4);
  EXPECT_EQ(out.pixels.shape(), (Shape{5, 16, 3, 16, 16}));
  EXPECT_LT(max_abs_diff(out.pixels, w.fine.pixels), 1e-6);
  const ImageGrid sub = c.run_stage2(w.coarse, w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 4,
                                     std::vector<std::size_t>{1, 4, 9, 12}, true);
  EXPECT_EQ(sub.view_ids, (std::vector<std::size_t>{1, 4, 9, 12}));
  EXPECT_LT(max_abs_diff(sub.pixels, slice_views(w.fine, {1, 4, 9, 12}).pixels), 1e-6);
  EXPECT_THROW(c.run_stage2(w.coarse, w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 4,
                            std::vector<std::size_t>{0, 1, 2, 3, 5}, true),
               ConfigError);
  EXPECT_THROW(c.run_stage2(w.coarse, w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 4, std::nullopt, true),
               ConfigError);
}

TEST(Cascade, Stage2LeavesCoarseGridUntouched) {
  World w(5, 4, 8, 16);
  Cascade c = w.oracle_cascade();
  const ImageGrid coarse = w.coarse;
  c.run_stage2(coarse, w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 4);
  EXPECT_EQ(coarse.pixels, w.coarse.pixels);
}

TEST(Cascade, InputErrors) {
  World w(5, 4, 8, 16);
  Cascade c = w.oracle_cascade();
  EXPECT_THROW(c.run_stage1(w.ref_views(), w.ref_views(), 1), ShapeError);
  EXPECT_THROW(c.run_stage1(w.ref_video({0, 1}), slice_frames(w.coarse, {0}), 1), ShapeError);
  Cascade empty{w.pc, w.codec, NoiseSchedule(50), {}, {}, {}, {}};
  EXPECT_THROW(empty.run_stage1(w.ref_video({0, 1}), w.ref_views(), 1), ConfigError);
}

TEST(Cascade, LearnedModelsAreDeterministic) {
  World w(2, 4, 8, 16);
  const DenoiserConfig dc = small_denoiser(w.codec.channels());
  BranchConfig bc;
  ParameterStore ps;
  init_denoiser(ps, dc, 3);
  init_branch(ps, dc, bc, 4);
  auto make = [&] {
    Cascade c{w.pc, w.codec, NoiseSchedule(50), denoiser_model(ps, dc, true), branch_model(ps, dc, bc), {}, {}};
    c.config.stage1_sampler.steps = 3;
    c.config.stage2_sampler.steps = 3;
    return c;
  };
  Cascade a = make(), b = make();
  const ImageGrid ga = a.run(w.ref_video({0, 1}), w.ref_views(), 9);
  const ImageGrid gb = b.run(w.ref_video({0, 1}), w.ref_views(), 9);
  EXPECT_EQ(ga.pixels, gb.pixels);
  EXPECT_EQ(ga.pixels.shape(), (Shape{2, 4, 3, 16, 16}));
  EXPECT_EQ(a.stats1.evaluations, 3u);
  EXPECT_EQ(a.stats2.evaluations, 3u);
  const ImageGrid gc = make().run(w.ref_video({0, 1}), w.ref_views(), 10);
  EXPECT_FALSE(gc.pixels == ga.pixels);
}

TEST(Cascade, AnchoredExtensionWithOracle) {
  World w(21, 4, 8, 16);
  Cascade c = w.oracle_cascade();
  std::vector<std::size_t> all(21);
  for (std::size_t t = 0; t < 21; ++t) all[t] = t;
  const ImageGrid out = c.extend_anchored(w.ref_video(all), w.ref_views(), 5);
  EXPECT_EQ(out.pixels.shape(), (Shape{21, 4, 3, 16, 16}));
  EXPECT_LT(max_abs_diff(out.pixels, w.fine.pixels), 1e-6);
  // 1 anchor cascade + 4 windows, each two stages of 10 steps
  EXPECT_EQ(c.stats1.evaluations, 50u);
  EXPECT_EQ(c.stats2.evaluations, 50u);
  EXPECT_THROW(c.extend_anchored(w.ref_video({0, 1, 2, 3, 4}), w.ref_views(), 5), ShapeError);
}

TEST(Cascade, AnchorFramesComeFromFirstPass) {
  // a model whose output depends on the absolute frame ids and the seed
  // reveals which pass produced each frame
  World w(21, 2, 8, 16);
  Cascade c = w.oracle_cascade();
  auto tagged = [](const Tensor& z, std::size_t t, const StageContext& ctx) {
    Tensor e = z;
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = std::sin(z[i] + 0.01 * double(t) + 0.1 * double(ctx.frame_ids.size()));
    return e;
  };
  c.stage1 = tagged;
  c.stage2 = tagged;
  std::vector<std::size_t> all(21), anchors{0, 5, 10, 15, 20};
  for (std::size_t t = 0; t < 21; ++t) all[t] = t;
  Cascade first = c;
  const ImageGrid pass1 = first.run(slice_frames(w.ref_video(all), anchors), w.ref_views(), 8, anchors);
  const ImageGrid out = c.extend_anchored(w.ref_video(all), w.ref_views(), 8);
  for (std::size_t k = 0; k < anchors.size(); ++k)
    EXPECT_EQ(grid_cell(out, anchors[k], 1), grid_cell(pass1, k, 1)) << anchors[k];
}

TEST(Views, SubsetSamplingIsUniform) {
  RngStream rng(77, 1);
  const std::size_t n = 10000, V = 16, k = 4;
  std::vector<std::size_t> hits(V, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = sample_training_views(V, k, rng);
    ASSERT_EQ(s.size(), k);
    for (std::size_t j = 1; j < k; ++j) ASSERT_LT(s[j - 1], s[j]);
    for (auto v : s) ++hits[v];
  }
  const double p = double(k) / V, sigma = std::sqrt(p * (1 - p) / n);
  for (auto h : hits) EXPECT_LT(std::abs(double(h) / n - p), 3 * sigma);
}

TEST(Views, SubsetEdgeCases) {
  RngStream a(5, 5), b(5, 5);
  EXPECT_EQ(sample_training_views(16, 4, a), sample_training_views(16, 4, b));
  RngStream r(1, 1);
  std::vector<std::size_t> all(6);
  for (std::size_t i = 0; i < 6; ++i) all[i] = i;
  EXPECT_EQ(sample_training_views(6, 6, r), all);
  EXPECT_THROW(sample_training_views(3, 4, r), ConfigError);
}

TEST(RunReport, ContainsRequiredFields) {
  RunReport r;
  r.seed = 42;
  r.config_hash = "abc";
  r.stage1.evaluations = 10;
  const std::string t = r.text();
  for (const char* key : {"seed\t42", "config_hash\tabc", "stage1_seconds", "stage1_evaluations\t10", "stage2_seconds"})
    EXPECT_NE(t.find(key), std::string::npos) << key;
}
