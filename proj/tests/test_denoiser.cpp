// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cascade4d/diffusion.hpp"
#include "cascade4d/gradcheck.hpp"

using namespace c4d;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig dc;
  dc.latent_channels = 3;
  dc.base_channels = 8;
  dc.heads = 2;
  dc.groups = 2;
  dc.lora_rank = 2;
  dc.embed_width = 8;
  return dc;
}

struct Inputs {
  Tensor z, cf, cv;
  std::vector<double> az, fp;
};

Inputs make_inputs(std::size_t T, std::size_t V, std::size_t hw, std::size_t Z, std::uint64_t seed) {
  Inputs in{Tensor::randn({T, V, Z, hw, hw}, CounterRng(seed, 1)), Tensor::randn({T, Z, hw, hw}, CounterRng(seed, 2)),
            Tensor::randn({V, Z, hw, hw}, CounterRng(seed, 3)), {}, default_frame_positions(T)};
  for (std::size_t v = 0; v < V; ++v) in.az.push_back(2.0 * M_PI * v / V);
  return in;
}

Tensor run(const ParameterStore& ps, const DenoiserConfig& dc, const Inputs& in, double t, bool lora) {
  Tape tape(false);
  Binder P(tape, ps);
  DenoiseArgs a{tape.constant(in.z), tape.constant(in.cf), tape.constant(in.cv), t, in.az, in.fp, nullptr, lora};
  a.alpha_bar = 0.6;
  return denoise(P, dc, a).value();
}

void init_attention_only(ParameterStore& ps, std::size_t C) { init_attention(ps, "att", C, 0, 9); }

}  // namespace

TEST(Attention, SingleKeyGetsFullWeight) {
  ParameterStore ps;
  init_attention_only(ps, 8);
  Tape tape(false);
  Binder P(tape, ps);
  Var q = tape.constant(Tensor::randn({3, 5, 8}, CounterRng(1, 1)));
  Var kv = tape.constant(Tensor::randn({3, 1, 8}, CounterRng(1, 2)));
  Var w;
  multi_head_attention(P, "att", q, kv, AttentionSpec{2, 0.0}, &w);
  ASSERT_EQ(w.shape(), (Shape{6, 5, 1}));
  for (double v : w.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(Attention, HeadCountMustDivideChannels) {
  ParameterStore ps;
  init_attention_only(ps, 8);
  Tape tape(false);
  Binder P(tape, ps);
  Var q = tape.constant(Tensor({1, 2, 8}));
  EXPECT_THROW(multi_head_attention(P, "att", q, q, AttentionSpec{3, 0.0}), ShapeError);
}

TEST(SpatialAttention, PermutationEquivariantWithoutPositions) {
  ParameterStore ps;
  init_attention(ps, "sp", 8, 0, 4);
  const std::size_t hw = 9;
  const Tensor h = Tensor::randn({2, 8, 3, 3}, CounterRng(2, 2));
  std::vector<std::size_t> perm(hw);
  std::iota(perm.begin(), perm.end(), 0);
  RngStream r(5, 5);
  for (std::size_t i = hw; i > 1; --i) std::swap(perm[i - 1], perm[r.below(i)]);
  auto permute = [&](const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t n = 0; n < 2 * 8; ++n)
      for (std::size_t p = 0; p < hw; ++p) y[n * hw + p] = x[n * hw + perm[p]];
    return y;
  };
  auto apply = [&](const Tensor& x, bool pos) {
    Tape tape(false);
    Binder P(tape, ps);
    return spatial_attention(P, "sp", tape.constant(x), AttentionSpec{2, 0.0}, pos).value();
  };
  EXPECT_LT(max_abs_diff(apply(permute(h), false), permute(apply(h, false))), 1e-12);
  EXPECT_GT(max_abs_diff(apply(permute(h), true), permute(apply(h, true))), 1e-6);
}

TEST(FrameAttention, SingleFrameMatchingReferenceReducesToValuePath) {
  ParameterStore ps;
  init_attention(ps, "fr", 8, 0, 4);
  const Tensor h = Tensor::randn({1, 8, 2, 2}, CounterRng(3, 1));
  Tape tape(false);
  Binder P(tape, ps);
  Var hv = tape.constant(h);
  Var out = frame_attention(P, "fr", hv, hv, 1, {0.0}, AttentionSpec{2, 0.0});
  // every key equals the query token, so attention returns its value row
  Var tok = transpose(reshape(hv, {1, 8, 4}), {2, 0, 1});  // [4, 1, 8]
  Var x = add(layernorm(tok), tape.constant(sinusoid(0.0, 8, 100.0).reshaped({1, 1, 8})));
  Var expect = add(tok, linear_tokens(P, "fr.out", linear_tokens(P, "fr.v", x)));
  expect = reshape(transpose(expect, {1, 2, 0}), {1, 8, 2, 2});
  EXPECT_LT(max_abs_diff(out.value(), expect.value()), 1e-12);
}

TEST(FrameAttention, RejectsMismatchedReference) {
  ParameterStore ps;
  init_attention(ps, "fr", 8, 0, 4);
  Tape tape(false);
  Binder P(tape, ps);
  Var h = tape.constant(Tensor({4, 8, 2, 2}));
  Var cf = tape.constant(Tensor({3, 8, 2, 2}));
  EXPECT_THROW(frame_attention(P, "fr", h, cf, 2, {0, 1}, AttentionSpec{2, 0.0}), ShapeError);
}

TEST(Denoiser, ViewPermutationEquivariance) {
  const DenoiserConfig dc = tiny();
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  const std::size_t T = 2, V = 3;
  const Inputs in = make_inputs(T, V, 4, 3, 7);
  const std::vector<std::size_t> perm{2, 0, 1};
  const std::size_t cell = 3 * 16;
  auto permute_grid = [&](const Tensor& g) {
    Tensor y(g.shape());
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < V; ++v)
        std::copy_n(g.data().begin() + (t * V + perm[v]) * cell, cell, y.data().begin() + (t * V + v) * cell);
    return y;
  };
  Inputs p = in;
  p.z = permute_grid(in.z);
  for (std::size_t v = 0; v < V; ++v) {
    std::copy_n(in.cv.data().begin() + perm[v] * cell, cell, p.cv.data().begin() + v * cell);
    p.az[v] = in.az[perm[v]];
  }
  EXPECT_LT(max_abs_diff(run(ps, dc, p, 17, false), permute_grid(run(ps, dc, in, 17, false))), 1e-12);
}

TEST(Denoiser, OutputShapeFullGrid) {
  DenoiserConfig dc;
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  const Inputs in = make_inputs(5, 16, 8, dc.latent_channels, 2);
  const Tensor out = run(ps, dc, in, 30, true);
  EXPECT_EQ(out.shape(), (Shape{5, 16, dc.latent_channels, 8, 8}));
  EXPECT_TRUE(out.all_finite());
}

TEST(Denoiser, ZeroLoraIsBitIdentical) {
  const DenoiserConfig dc = tiny();
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  const Inputs in = make_inputs(2, 2, 4, 3, 3);
  EXPECT_EQ(run(ps, dc, in, 9, true), run(ps, dc, in, 9, false));
}

TEST(Denoiser, ShapeErrors) {
  const DenoiserConfig dc = tiny();
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  Inputs in = make_inputs(2, 2, 4, 3, 3);
  in.cv = Tensor({3, 3, 4, 4});
  EXPECT_THROW(run(ps, dc, in, 9, false), ShapeError);
  in = make_inputs(2, 2, 3, 3, 3);
  EXPECT_THROW(run(ps, dc, in, 9, false), ShapeError);
  DenoiserConfig bad = dc;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Denoiser, PartitionsAndSites) {
  const DenoiserConfig dc = tiny();
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  EXPECT_GT(ps.count(Partition::base), 0u);
  EXPECT_GT(ps.count(Partition::lora), 0u);
  EXPECT_EQ(ps.count(Partition::branch), 0u);
  for (const auto& n : ps.names(Partition::lora)) EXPECT_NE(n.find(".lora_"), std::string::npos) << n;
  EXPECT_EQ(all_sites(2), (std::vector<std::string>{"enc0", "enc1", "dec1", "dec0"}));
}

TEST(Denoiser, FullNetworkGradient) {
  DenoiserConfig dc = tiny();
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  // move LoRA off zero so every path carries gradient
  for (const auto& n : ps.names(Partition::lora)) ps.mut(n) = Tensor::randn(ps.get(n).shape(), CounterRng(4, fnv1a(n)), 0.1);
  const Inputs in = make_inputs(2, 2, 4, 3, 6);
  const Tensor eps = Tensor::randn(in.z.shape(), CounterRng(6, 9));
  BoundFn f = [&](Binder& P) {
    Tape& t = P.tape();
    DenoiseArgs a{t.constant(in.z), t.constant(in.cf), t.constant(in.cv), 12.0, in.az, in.fp, nullptr, true};
    a.alpha_bar = 0.6;
    return mse(denoise(P, dc, a), t.constant(eps));
  };
  std::set<std::string> names;
  for (const auto& n : ps.names()) names.insert(n);
  GradCheckOptions opt;
  opt.max_coords = 2;
  const GradCheckReport r = store_grad_check(f, ps, names, opt);
  EXPECT_TRUE(r.passed) << r.worst << " rel " << r.max_rel_err;
}

TEST(Denoiser, VPredictionConvertsToEps) {
  DenoiserConfig ev = tiny();
  ev.prediction = Prediction::eps;
  const DenoiserConfig vv = tiny();
  ParameterStore ps;
  init_denoiser(ps, vv, 4);
  const Inputs in = make_inputs(2, 2, 4, 3, 12);
  const Tensor raw = run(ps, ev, in, 7.0, false);
  const Tensor conv = run(ps, vv, in, 7.0, false);  // run() sets alpha_bar 0.6
  for (std::size_t i = 0; i < raw.size(); ++i)
    EXPECT_NEAR(conv[i], std::sqrt(0.6) * raw[i] + std::sqrt(0.4) * in.z[i], 1e-12);

  Tape tape(false);
  Binder P(tape, ps);
  DenoiseArgs a{tape.constant(in.z), tape.constant(in.cf), tape.constant(in.cv), 7.0, in.az, in.fp, nullptr, false};
  EXPECT_THROW(denoise(P, vv, a), ConfigError);
  EXPECT_EQ(parse_prediction("eps"), Prediction::eps);
  EXPECT_THROW(parse_prediction("x0"), ConfigError);
}
