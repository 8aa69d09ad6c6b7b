// SPDX-License-Identifier: Apache-2.0
#pragma once

// Invariant and gradient-check suite run by `cascade4d selftest`.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cascade4d/cascade.hpp"
#include "cascade4d/config.hpp"
#include "cascade4d/eval.hpp"
#include "cascade4d/flow.hpp"
#include "cascade4d/forge.hpp"
#include "cascade4d/gradcheck.hpp"
#include "cascade4d/render.hpp"

namespace c4d {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelfCheck {
  std::string name;
  std::function<CheckResult()> run;
};

namespace selftest {

inline CheckResult verdict(bool ok, std::string detail) { return CheckResult{"", ok, std::move(detail), 0.0}; }

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

inline DenoiserConfig tiny_denoiser() {
  DenoiserConfig dc;
  dc.latent_channels = 3;
  dc.base_channels = 8;
  dc.levels = 2;
  dc.heads = 2;
  dc.groups = 2;
  dc.lora_rank = 2;
  dc.embed_width = 8;
  return dc;
}

/// Projects an output onto fixed random weights.
inline Var project(Var y, std::uint64_t seed) {
  Var w = y.tape->constant(Tensor::randn(y.shape(), CounterRng(seed)));
  return sum(mul(y, w));
}

inline Tensor rnd(Shape s, std::uint64_t seed) { return Tensor::randn(std::move(s), CounterRng(seed, 0xA11)); }

struct GradCase {
  const char* name;
  ParamMap params;
  ScalarFn fn;
};

/// One case per differentiable primitive.
inline std::vector<GradCase> primitive_cases() {
  return {
      {"add", {{"a", rnd({3, 4}, 1)}, {"b", rnd({4}, 2)}},
       [](Tape&, const ParamVars& p) { return project(add(p.at("a"), p.at("b")), 9); }},
      {"mul", {{"a", rnd({3, 4}, 1)}, {"b", rnd({3, 1}, 2)}},
       [](Tape&, const ParamVars& p) { return project(mul(p.at("a"), p.at("b")), 9); }},
      {"matmul", {{"a", rnd({2, 3, 4}, 1)}, {"b", rnd({4, 5}, 2)}},
       [](Tape&, const ParamVars& p) { return project(matmul(p.at("a"), p.at("b")), 9); }},
      {"matmul_batched", {{"a", rnd({2, 3, 4}, 1)}, {"b", rnd({2, 4, 5}, 2)}},
       [](Tape&, const ParamVars& p) { return project(matmul(p.at("a"), p.at("b")), 9); }},
      {"conv2d", {{"x", rnd({2, 3, 5, 5}, 1)}, {"w", rnd({4, 3, 3, 3}, 2)}},
       [](Tape&, const ParamVars& p) { return project(conv2d(p.at("x"), p.at("w"), 2, 1), 9); }},
      {"transpose", {{"a", rnd({2, 3, 4}, 1)}},
       [](Tape&, const ParamVars& p) { return project(transpose(p.at("a"), {2, 0, 1}), 9); }},
      {"reshape", {{"a", rnd({2, 6}, 1)}},
       [](Tape&, const ParamVars& p) { return project(reshape(p.at("a"), {3, 4}), 9); }},
      {"concat", {{"a", rnd({2, 3}, 1)}, {"b", rnd({2, 2}, 2)}},
       [](Tape&, const ParamVars& p) { return project(concat({p.at("a"), p.at("b")}, 1), 9); }},
      {"split", {{"a", rnd({5, 3}, 1)}},
       [](Tape&, const ParamVars& p) {
         auto parts = split(p.at("a"), 0, {2, 3});
         return add(project(parts[0], 9), project(parts[1], 10));
       }},
      {"softmax", {{"a", rnd({3, 5}, 1)}},
       [](Tape&, const ParamVars& p) { return project(softmax(p.at("a"), 0), 9); }},
      {"layernorm", {{"a", rnd({3, 6}, 1)}},
       [](Tape&, const ParamVars& p) { return project(layernorm(p.at("a")), 9); }},
      {"groupnorm", {{"a", rnd({2, 4, 3, 3}, 1)}},
       [](Tape&, const ParamVars& p) { return project(groupnorm(p.at("a"), 2), 9); }},
      {"silu", {{"a", rnd({10}, 1)}}, [](Tape&, const ParamVars& p) { return project(silu(p.at("a")), 9); }},
      {"mean", {{"a", rnd({3, 4}, 1)}}, [](Tape&, const ParamVars& p) { return project(mean(p.at("a"), 1), 9); }},
      {"sum", {{"a", rnd({3, 4}, 1)}}, [](Tape&, const ParamVars& p) { return project(sum(p.at("a"), 0), 9); }},
      {"broadcast", {{"a", rnd({3, 1}, 1)}},
       [](Tape&, const ParamVars& p) { return project(broadcast_to(p.at("a"), {2, 3, 4}), 9); }},
      {"scale", {{"a", rnd({4}, 1)}}, [](Tape&, const ParamVars& p) { return project(scale(p.at("a"), -2.5), 9); }},
      {"gather", {{"a", rnd({4, 3}, 1)}},
       [](Tape&, const ParamVars& p) { return project(gather(p.at("a"), 0, {3, 0, 3}), 9); }},
      {"avgpool_upsample", {{"a", rnd({1, 2, 4, 4}, 1)}},
       [](Tape&, const ParamVars& p) { return project(upsample2(avgpool2(p.at("a"))), 9); }},
      {"attention", {{"q", rnd({2, 3, 4}, 1)}, {"k", rnd({2, 5, 4}, 2)}, {"v", rnd({2, 5, 3}, 3)}},
       [](Tape&, const ParamVars& p) { return project(attention(p.at("q"), p.at("k"), p.at("v"), 0.7), 5); }},
      {"mse", {{"a", rnd({6}, 1)}, {"b", rnd({6}, 2)}},
       [](Tape&, const ParamVars& p) { return mse(p.at("a"), p.at("b")); }},
  };
}

inline CheckResult grad_primitives() {
  double worst = 0.0;
  std::string where;
  for (auto& c : primitive_cases()) {
    const auto rep = finite_diff_check(c.fn, c.params, {.step = 1e-4, .tol = 1e-3});
    if (rep.max_rel_err >= worst) {
      worst = rep.max_rel_err;
      where = std::string(c.name) + ":" + rep.worst;
    }
    if (!rep.passed) return verdict(false, std::string(c.name) + " rel err " + fmt(rep.max_rel_err));
  }
  return verdict(true, "max rel err " + fmt(worst) + " (" + where + ")");
}

/// T=2, V=2, 4x4 latents; every adapter and injection moved off zero.
struct LossFixture {
  DenoiserConfig dc = tiny_denoiser();
  BranchConfig bc;
  NoiseSchedule s{50};
  ParameterStore ps;
  Stage1Batch b1;
  Stage2Batch b2;
  Tensor z_t, eps;
  std::size_t t = 23;

  LossFixture() {
    init_denoiser(ps, dc, 3);
    init_branch(ps, dc, bc, 4);
    for (const auto& n : ps.names())
      if (ps.partition(n) != Partition::base && ps.get(n).size() && l2_norm(ps.get(n)) == 0.0)
        ps.mut(n) = Tensor::randn(ps.get(n).shape(), CounterRng(8, fnv1a(n)), 0.1);
    b1.z0 = rnd({2, 2, 3, 4, 4}, 11);
    b1.cf = rnd({2, 3, 4, 4}, 12);
    b1.cv = rnd({2, 3, 4, 4}, 13);
    b1.azimuths = {0.0, std::numbers::pi};
    b1.frame_pos = default_frame_positions(2);
    b2 = Stage2Batch{b1.z0, rnd({2, 2, 3, 4, 4}, 14), b1.cf, b1.cv, b1.azimuths, b1.frame_pos, {0, 1}, {0, 1}};
    eps = rnd({2, 2, 3, 4, 4}, 15);
    z_t = add_noise(b1.z0, s, t, eps);
  }
};

inline CheckResult grad_loss(int stage) {
  LossFixture f;
  BoundFn fn = [&](Binder& P) {
    return stage == 1 ? stage1_loss(P, f.dc, f.s, f.b1, f.z_t, f.t, f.eps)
                      : stage2_loss(P, f.dc, f.bc, f.s, f.b2, f.z_t, f.t, f.eps);
  };
  std::set<std::string> names;
  for (const auto& n : f.ps.names())
    if (stage == 2 || f.ps.partition(n) != Partition::branch) names.insert(n);
  GradCheckOptions o;
  o.max_coords = 2;
  const auto rep = store_grad_check(fn, f.ps, names, o);
  return verdict(rep.passed, std::to_string(rep.coords_checked) + " coords, max rel err " + fmt(rep.max_rel_err) +
                                 " at " + rep.worst);
}

inline CheckResult zero_init(int stage) {
  const DenoiserConfig dc = tiny_denoiser();
  BranchConfig bc;
  ParameterStore ps;
  init_denoiser(ps, dc, 5);
  init_branch(ps, dc, bc, 6);
  for (std::uint64_t k = 0; k < 20; ++k) {
    CounterRng r(k, 0x2E40);
    const Tensor z = Tensor::randn({2, 2, 3, 4, 4}, CounterRng(k, 1)), cf = Tensor::randn({2, 3, 4, 4}, CounterRng(k, 2));
    const Tensor cv = Tensor::randn({2, 3, 4, 4}, CounterRng(k, 3)), lay = Tensor::randn({2, 2, 3, 4, 4}, CounterRng(k, 4));
    const double t = 1.0 + std::floor(49.0 * r.uniform(0));
    auto run = [&](bool adapted) {
      Tape tape(false);
      Binder P(tape, ps);
      Injections inj;
      if (adapted && stage == 2) {
        BranchArgs ba{tape.constant(lay), tape.constant(cf), tape.constant(z), nullptr};
        ba.t = t;
        inj = branch_forward(P, dc, bc, ba);
      }
      DenoiseArgs a{tape.constant(z), tape.constant(cf), tape.constant(cv), t, {0.0, std::numbers::pi}, {0.0, 1.0},
                    adapted && stage == 2 ? &inj : nullptr, adapted && stage == 1};
      a.alpha_bar = NoiseSchedule(50).alpha_bar(static_cast<std::size_t>(t));
      return denoise(P, dc, a).value();
    };
    if (!(run(true) == run(false))) return verdict(false, "input " + std::to_string(k) + " differs");
  }
  return verdict(true, "20 inputs bit-identical");
}

inline CheckResult noising() {
  const Tensor z0 = rnd({10000}, 21), eps = rnd({10000}, 22);
  if (!(add_noise_abar(z0, 1.0, eps) == z0)) return verdict(false, "abar=1 does not return z0");
  if (!(add_noise_abar(z0, 0.0, eps) == eps)) return verdict(false, "abar=0 does not return eps");
  const NoiseSchedule s(50);
  double worst = 0.0;
  for (std::size_t t : {5u, 20u, 35u, 50u}) {
    const Tensor noise = Tensor::randn({10000}, CounterRng(t, 0xD1));
    const Tensor zt = add_noise(z0, s, t, noise);
    const double a = s.sqrt_alpha_bar(t);
    double m = 0.0, q = 0.0;
    for (std::size_t i = 0; i < zt.size(); ++i) {
      const double d = zt[i] - a * z0[i];
      m += d;
      q += d * d;
    }
    m /= 1e4;
    const double var = q / 1e4 - m * m, want = 1.0 - s.alpha_bar(t);
    worst = std::max(worst, std::abs(var / want - 1.0));
  }
  return verdict(worst < 0.05, "exact limits, worst variance deviation " + fmt(100 * worst) + "%");
}

inline CheckResult map_contract() {
  RngStream r(31, 7);
  double worst_row = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t W = 1 + r.below(4), H = 1 + r.below(4), V = 1 + r.below(4), C = 4 * (1 + r.below(4)), Z = 3;
    const std::size_t T = 1 + r.below(2);
    ParameterStore ps;
    ps.add_normal("m.LQ", {Z, C}, 0.5, Partition::branch, k);
    ps.add_normal("m.LK", {C, C}, 0.5, Partition::branch, k + 100);
    ps.add_normal("m.LV", {C, C}, 0.5, Partition::branch, k + 200);
    Tape tape(false);
    Binder P(tape, ps);
    MapTrace tr;
    map_attend(P, "m", tape.constant(Tensor::randn({T * V, C, H, W}, CounterRng(k, 1))),
               tape.constant(Tensor::randn({T, Z, H, W}, CounterRng(k, 2))), T, MapOrientation::reference_as_query, 1,
               &tr);
    const std::size_t whv = W * H * V;
    if (tr.q != Shape{whv, C} || tr.k != Shape{C, whv} || tr.v != Shape{whv, C})
      return verdict(false, "tuple " + std::to_string(k) + ": q " + shape_str(tr.q) + " k " + shape_str(tr.k) +
                                " v " + shape_str(tr.v));
    const std::size_t nk = tr.weights.dim(3), rows = tr.weights.size() / nk;
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < nk; ++j) s += tr.weights[i * nk + j];
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
  }
  return verdict(worst_row <= 1e-12, "20 tuples; worst |row sum - 1| " + fmt(worst_row));
}

/// Ground truth at both resolutions plus a cascade whose stage models
/// return the exact noise for it.
struct OracleWorld {
  PipelineConfig pc;
  CodecSpec codec{4, 7};
  ImageGrid fine, coarse;
  LatentGrid fine_z, coarse_z;

  OracleWorld(std::size_t T, std::size_t V, std::size_t coarse_res, std::size_t fine_res) {
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

  ImageGrid ref_video(const std::vector<std::size_t>& frames) const {
    return slice_views(slice_frames(fine, frames), {0});
  }
  ImageGrid ref_views() const { return slice_frames(fine, {0}); }

  Cascade cascade() const {
    Cascade c{pc, codec, NoiseSchedule(50), {}, {}, {}, {}};
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

inline CheckResult oracle_cascade() {
  OracleWorld w(21, 4, 8, 16);
  std::vector<std::size_t> all(21), window{0, 1, 2, 3, 4}, anchors{0, 5, 10, 15, 20};
  for (std::size_t t = 0; t < 21; ++t) all[t] = t;
  Cascade c = w.cascade();
  const double e1 = max_abs_diff(c.run_stage1(w.ref_video(window), w.ref_views(), 1).pixels,
                                 slice_frames(w.coarse, window).pixels);
  const double e2 = max_abs_diff(c.run(w.ref_video(window), w.ref_views(), 2).pixels, slice_frames(w.fine, window).pixels);
  const double e3 = max_abs_diff(c.extend_anchored(w.ref_video(all), w.ref_views(), 3).pixels, w.fine.pixels);

  // a frame-count-dependent model shows which pass produced each anchor
  Cascade tagged = w.cascade();
  tagged.stage1 = tagged.stage2 = [](const Tensor& z, std::size_t t, const StageContext& ctx) {
    Tensor e = z;
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = std::sin(z[i] + 0.01 * double(t) + 0.1 * double(ctx.frame_ids[1]));
    return e;
  };
  Cascade first = tagged;
  const ImageGrid pass1 = first.run(slice_frames(w.ref_video(all), anchors), w.ref_views(), 8, anchors);
  const ImageGrid out = tagged.extend_anchored(w.ref_video(all), w.ref_views(), 8);
  bool verbatim = true;
  for (std::size_t k = 0; k < anchors.size(); ++k)
    for (std::size_t v = 0; v < 4; ++v) verbatim &= grid_cell(out, anchors[k], v) == grid_cell(pass1, k, v);
  const double worst = std::max({e1, e2, e3});
  return verdict(worst < 1e-6 && verbatim, "stage1 " + fmt(e1) + ", cascade " + fmt(e2) + ", 21-frame " + fmt(e3) +
                                               (verbatim ? ", anchors verbatim" : ", anchors NOT verbatim"));
}

inline CheckResult frechet_oracles() {
  // 1-D: (m1-m2)^2 + s1 + s2 - 2 sqrt(s1 s2)
  GaussianStats a{{0.3}, Matrix(1), 10}, b{{-1.1}, Matrix(1), 10};
  a.cov(0, 0) = 2.0;
  b.cov(0, 0) = 0.5;
  const double want = 1.4 * 1.4 + 2.0 + 0.5 - 2.0 * std::sqrt(1.0);
  const double got = frechet_distance(a, b);
  if (std::abs(got - want) > 1e-12) return verdict(false, "1-D closed form " + fmt(got) + " vs " + fmt(want));

  const FeatureExtractor fx = latent_stats_extractor();
  CameraRing ring;
  ring.views = 4;
  std::vector<ImageGrid> ref;
  for (std::size_t i = 0; i < 4; ++i) ref.push_back(ImageGrid::make(Tensor::uniform({4, 4, 3, 8, 8}, CounterRng(5, i)), ring));
  const double zf = fvd_f(ref, ref, fx), zv = fvd_v(ref, ref, fx), zd = fvd_diag(ref, ref, fx);
  auto bright = ref;
  for (auto& g : bright)
    for (auto& p : g.pixels.vec()) p = 0.5 + 0.5 * p;
  const double pf = fvd_f(bright, ref, fx), pv = fvd_v(bright, ref, fx), pd = fvd_diag(bright, ref, fx);
  const bool ok = std::max({zf, zv, zd}) <= 1e-8 && std::min({pf, pv, pd}) > 1e-3;
  return verdict(ok, "identical " + fmt(std::max({zf, zv, zd})) + ", distinct min " + fmt(std::min({pf, pv, pd})));
}

/// Sample i paints view v with grey level (i + perm[v]) mod V.
inline std::vector<ImageGrid> latin_set(std::size_t V, const std::vector<std::size_t>& perm) {
  std::vector<ImageGrid> out;
  CameraRing ring;
  ring.views = V;
  const std::size_t T = 3, res = 8, cell = 3 * res * res;
  for (std::size_t i = 0; i < V; ++i) {
    Tensor px({T, V, 3, res, res});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < V; ++v) {
        const double level = 0.1 + 0.8 * double((i + perm[v]) % V) / double(V - 1);
        for (std::size_t j = 0; j < cell; ++j)
          px[(t * V + v) * cell + j] = level + 0.02 * double(t % 2) * (j < res * res ? 1.0 : 0.5);
      }
    out.push_back(ImageGrid::make(std::move(px), ring));
  }
  return out;
}

inline CheckResult view_permutation() {
  const FeatureExtractor fx = latent_stats_extractor();
  std::vector<std::size_t> id{0, 1, 2, 3, 4, 5}, perm{3, 0, 5, 1, 4, 2};
  const auto ref = latin_set(6, id), shuffled = latin_set(6, perm);
  const double f = fvd_f(shuffled, ref, fx), v = fvd_v(shuffled, ref, fx);
  return verdict(f <= 1e-8 && v > 1e-3, "FVD-F " + fmt(f) + ", FVD-V " + fmt(v));
}

inline Tensor texture(double sx, double sy, std::size_t n = 64) {
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

inline CheckResult flow_translations() {
  double worst = 0.0;
  for (double dx : {-4.0, -2.5, 0.0, 1.0, 3.0, 4.0})
    for (double dy : {-3.0, 0.0, 2.0, 4.0}) {
      const FlowField f = estimate_flow(texture(0, 0), texture(dx, dy));
      double su = 0, sv = 0, n = 0;
      for (std::size_t y = 16; y < 48; ++y)
        for (std::size_t x = 16; x < 48; ++x) {
          su += f.u[y * 64 + x];
          sv += f.v[y * 64 + x];
          ++n;
        }
      worst = std::max({worst, std::abs(su / n - dx), std::abs(sv / n - dy)});
    }
  return verdict(worst <= 0.5, "worst component error " + fmt(worst) + " px");
}

inline CheckResult curation_corpus() {
  const FilterConfig c;
  std::size_t accepted = 0;
  std::string pattern;
  for (std::size_t i = 0; i < 10; ++i) {
    const CorpusSample s = render_corpus_sample(i, 1, 5, 2, 64);
    const bool ok = filter_sample(s.grid, c).accepted;
    const bool designed = s.kind == SampleKind::moderate;
    if (ok != designed) return verdict(false, s.id + " (" + sample_kind_name(s.kind) + ") misclassified");
    accepted += ok;
    pattern += ok ? 'A' : 'r';
  }
  return verdict(accepted == 6, std::to_string(accepted) + " of 10 accepted (" + pattern + ")");
}

inline CheckResult config_round_trip() {
  RunConfig c;
  c.seed = 99;
  c.filter_tau_p = 0.1 + 0.2;
  c.clip_scorer = "exec score";
  const RunConfig back = parse_config_text(c.serialize());
  bool rejects = false;
  try {
    parse_config_text("not_a_key=1\n");
  } catch (const ConfigError&) {
    rejects = true;
  }
  return verdict(back.serialize() == c.serialize() && back.hash() == c.hash() && rejects,
                 "hash " + c.hash() + (rejects ? ", unknown keys rejected" : ", unknown key accepted"));
}

}  // namespace selftest

inline std::vector<SelfCheck> selftest_checks() {
  using namespace selftest;
  return {
      {"grad.primitives", grad_primitives},
      {"grad.stage1_loss", [] { return grad_loss(1); }},
      {"grad.stage2_loss", [] { return grad_loss(2); }},
      {"zero_init.stage1", [] { return zero_init(1); }},
      {"zero_init.stage2", [] { return zero_init(2); }},
      {"noising", noising},
      {"map.contract", map_contract},
      {"cascade.oracle", oracle_cascade},
      {"metrics.frechet", frechet_oracles},
      {"metrics.view_permutation", view_permutation},
      {"flow.translations", flow_translations},
      {"forge.corpus", curation_corpus},
      {"config.round_trip", config_round_trip},
  };
}

/// Runs one check, turning exceptions into failures.
inline CheckResult run_check(const SelfCheck& c) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = c.run();
  } catch (const std::exception& e) {
    r = CheckResult{"", false, std::string("threw: ") + e.what(), 0.0};
  }
  r.name = c.name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace c4d
