// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one PASS/FAIL line per criterion. Optional arguments pick a
// subset by number, e.g. `acceptance 6 7`.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "cascade4d/commands.hpp"
#include "cascade4d/selftest.hpp"

#ifndef C4D_CLI_PATH
#define C4D_CLI_PATH "cascade4d"
#endif

using namespace c4d;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", v);
  return b;
}

/// Runs selftest checks by name; all must pass.
Outcome checks(const std::vector<std::string>& names, double budget_s = 0.0) {
  Outcome o{true, ""};
  double total = 0.0;
  for (const auto& c : selftest_checks()) {
    if (std::find(names.begin(), names.end(), c.name) == names.end()) continue;
    const CheckResult r = run_check(c);
    total += r.seconds;
    o.pass &= r.passed;
    o.detail += (o.detail.empty() ? "" : "; ") + r.name + ": " + r.detail;
  }
  if (budget_s > 0.0) {
    o.pass &= total < budget_s;
    o.detail += "; " + fmt(total) + "s";
  }
  return o;
}

Outcome c1() {
  return checks({"grad.primitives", "grad.stage1_loss", "grad.stage2_loss"}, 120.0);
}
Outcome c2() { return checks({"zero_init.stage1", "zero_init.stage2"}); }
Outcome c3() { return checks({"noising"}); }
Outcome c4() { return checks({"map.contract"}); }
Outcome c5() { return checks({"cascade.oracle"}); }

/// Multi-view renders of held-out scenes used to pretrain the mainstream.
void pretrain_base(ParameterStore& ps, const DenoiserConfig& dc, const NoiseSchedule& s, const CodecSpec& codec,
                   const CameraRing& ring, std::size_t T, std::size_t fine, RngStream& views) {
  std::vector<ImageGrid> corpus;
  for (std::uint64_t i = 0; i < 8; ++i) corpus.push_back(render_scene(moving_scene(100 + i), ring, T, fine, fine));
  TrainOptions bo;
  bo.steps = 300;
  bo.lr = 0.05;
  bo.momentum = 0.9;
  bo.seed = 77;
  train_base(ps, dc, s, [&](std::size_t k) {
    return make_view_batch(corpus[k % corpus.size()], sample_training_views(ring.views, 4, views), codec);
  }, bo);
}

Outcome c6() {
  const auto t0 = Clock::now();
  const std::size_t T = 2, fine = 32, coarse = 16, V = 16;
  const CodecSpec codec(2, 7);
  CameraRing ring;
  ring.views = V;
  const ImageGrid g = render_scene(moving_scene(11), ring, T, fine, fine);
  DenoiserConfig dc;
  dc.latent_channels = codec.channels();
  dc.lora_rank = 32;
  const BranchConfig bc;
  const NoiseSchedule s(50);
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  init_branch(ps, dc, bc, 2);
  RngStream vr(9, 9);
  pretrain_base(ps, dc, s, codec, ring, T, fine, vr);

  TrainOptions o1;
  o1.steps = 500;
  o1.lr = 1.0;
  o1.momentum = 0.9;
  o1.seed = 1;
  o1.fixed_noise = true;
  const auto l1 = train_stage1(ps, dc, s, {make_stage1_batch(g, coarse, codec)}, o1);
  const double drop = l1.back() / l1.front();

  TrainOptions o2;
  o2.steps = 1200;
  o2.lr = 0.008;
  o2.momentum = 0.9;
  o2.seed = 5;
  o2.adam = true;
  o2.cosine_decay = true;
  o2.timesteps = SamplerConfig{}.resolve(s);
  train_stage2(ps, dc, bc, s, [&](std::size_t) {
    return make_stage2_batch(g, sample_training_views(V, 4, vr), coarse, codec);
  }, o2);

  PipelineConfig pc;
  pc.views = V;
  pc.subset = 4;
  pc.coarse_res = coarse;
  pc.fine_res = fine;
  const ImageGrid cg = downsample_grid(g, 2), rv = slice_views(g, {0}), rvs = slice_frames(g, {0});
  Cascade cond{pc, codec, s, {}, branch_model(ps, dc, bc), {}, {}};
  Cascade base{pc, codec, s, {}, denoiser_model(ps, dc, false), {}, {}};
  const double ec = mean_abs_error(cond.run_stage2(cg, rv, rvs, 3).pixels, g.pixels);
  const double eb = mean_abs_error(base.run_stage2(cg, rv, rvs, 3).pixels, g.pixels);
  const double secs = since(t0);
  const bool ok = drop < 0.10 && ec <= 0.7 * eb && secs < 1800.0;
  return {ok, "stage1 loss " + fmt(100.0 * drop) + "% of step 0; conditioned " + fmt(ec) + " vs base " + fmt(eb) +
                  " (ratio " + fmt(ec / eb) + "); " + fmt(secs) + "s"};
}

Outcome c7() {
  const std::size_t T = 2, fine = 16, coarse = 8, V = 8, seeds = 5;
  const CodecSpec codec(2, 7);
  CameraRing ring;
  ring.views = V;
  DenoiserConfig dc;
  dc.latent_channels = codec.channels();
  const NoiseSchedule s(50);
  ParameterStore base;
  init_denoiser(base, dc, 1);
  RngStream vr(9, 9);
  pretrain_base(base, dc, s, codec, ring, T, fine, vr);

  PipelineConfig pc;
  pc.views = V;
  pc.subset = 4;
  pc.coarse_res = coarse;
  pc.fine_res = fine;
  double sum_full = 0.0, sum_adapter = 0.0;
  std::string per_seed;
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    const ImageGrid g = render_scene(moving_scene(200 + seed), ring, T, fine, fine);
    double err[2];
    for (int k = 0; k < 2; ++k) {
      BranchConfig bc;
      bc.variant = k ? BranchVariant::adapter : BranchVariant::full;
      ParameterStore ps = base;
      init_branch(ps, dc, bc, 2 + seed);
      TrainOptions o;
      o.steps = 300;
      o.lr = 0.008;
      o.momentum = 0.9;
      o.seed = mix_keys(seed, 5);
      o.adam = true;
      o.timesteps = SamplerConfig{}.resolve(s);
      RngStream r(seed, 9);
      train_stage2(ps, dc, bc, s, [&](std::size_t) {
        return make_stage2_batch(g, sample_training_views(V, 4, r), coarse, codec);
      }, o);
      Cascade c{pc, codec, s, {}, branch_model(ps, dc, bc), {}, {}};
      const ImageGrid out = c.run_stage2(downsample_grid(g, 2), slice_views(g, {0}), slice_frames(g, {0}), seed);
      err[k] = mean_abs_error(out.pixels, g.pixels);
    }
    sum_full += err[0];
    sum_adapter += err[1];
    per_seed += (per_seed.empty() ? "" : ", ") + ("seed " + std::to_string(seed) + " full " + fmt(err[0]) +
                                                 " adapter " + fmt(err[1]));
  }
  const double mf = sum_full / seeds, ma = sum_adapter / seeds;
  return {mf <= ma, "mean full " + fmt(mf) + " vs adapter " + fmt(ma) + " [" + per_seed + "]"};
}

/// Independent route through Eigen: eigenvalues of the product S1 S2.
Outcome eigen_oracle() {
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 10; ++k) {
    const std::size_t d = 2 + k % 6;
    GaussianStats st[2];
    Eigen::MatrixXd S[2];
    Eigen::VectorXd m[2];
    for (int j = 0; j < 2; ++j) {
      const Tensor a = Tensor::randn({d, d + 3}, CounterRng(k, 10 + j));
      const Tensor mu = Tensor::randn({d}, CounterRng(k, 20 + j));
      Eigen::MatrixXd A(d, d + 3);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d + 3; ++c) A(r, c) = a[r * (d + 3) + c];
      S[j] = A * A.transpose() / double(d + 3);
      m[j] = Eigen::VectorXd(d);
      st[j].mean.assign(d, 0.0);
      st[j].cov = Matrix(d);
      st[j].count = 100;
      for (std::size_t r = 0; r < d; ++r) {
        m[j](r) = st[j].mean[r] = mu[r];
        for (std::size_t c = 0; c < d; ++c) st[j].cov(r, c) = S[j](r, c);
      }
    }
    Eigen::EigenSolver<Eigen::MatrixXd> es(S[0] * S[1]);
    double tr = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
    const double want = (m[0] - m[1]).squaredNorm() + S[0].trace() + S[1].trace() - 2.0 * tr;
    worst = std::max(worst, std::abs(frechet_distance(st[0], st[1]) - want));
  }
  return {worst < 1e-6, "eigen oracle max err " + fmt(worst)};
}

Outcome c8() {
  Outcome o = checks({"metrics.frechet", "metrics.view_permutation"});
  const Outcome e = eigen_oracle();
  return {o.pass && e.pass, o.detail + "; " + e.detail};
}

Outcome c9() { return checks({"flow.translations", "forge.corpus"}); }

Outcome c10() {
  const CodecSpec codec(2, 7);
  CameraRing ring;
  ring.views = 16;
  PipelineConfig pc;
  pc.coarse_res = 16;
  pc.fine_res = 32;
  DenoiserConfig dc;
  dc.latent_channels = codec.channels();
  const BranchConfig bc;
  ParameterStore ps;
  init_denoiser(ps, dc, 1);
  init_branch(ps, dc, bc, 2);
  const ImageGrid g = render_scene(moving_scene(3), ring, pc.window, pc.fine_res, pc.fine_res);
  Cascade cas{pc, codec, NoiseSchedule(50), denoiser_model(ps, dc, true), branch_model(ps, dc, bc), {}, {}};
  const ImageGrid rv = slice_views(g, {0}), rvs = slice_frames(g, {0});
  const ImageGrid coarse = cas.run_stage1(rv, rvs, 4);
  cas.run_stage2(coarse, rv, rvs, 4);
  const bool ok = cas.stats1.evaluations == cas.stats2.evaluations && cas.stats1.seconds < cas.stats2.seconds;
  return {ok, "stage1 coarse " + fmt(cas.stats1.seconds) + "s vs stage2 fine " + fmt(cas.stats2.seconds) + "s over " +
                  std::to_string(cas.stats1.evaluations) + " steps"};
}

int sh(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::set<fs::path> names;
  for (const auto& e : fs::recursive_directory_iterator(a)) names.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (!names.count(fs::relative(e.path(), b))) return false;
  for (const auto& n : names) {
    if (!fs::exists(b / n)) return false;
    if (fs::is_regular_file(a / n) && slurp(a / n) != slurp(b / n)) return false;
  }
  return !names.empty();
}

Outcome c11() {
  const fs::path dir = fs::temp_directory_path() / "cascade4d_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "coarse_res=16\nfine_res=32\nviews=4\ncodec_patch=2\nsynth_res=32\nsynth_count=1\n";
  }
  const std::string cli = C4D_CLI_PATH, cfg = "--config " + (dir / "run.cfg").string();
  const int rs = sh(cli + " synth " + cfg + " --out " + (dir / "in").string());
  const std::string gen = cli + " generate " + cfg + " --seed 11 --input " + (dir / "in" / "sample_0000").string();
  const int r1 = sh(gen + " --out " + (dir / "a").string());
  const int r2 = sh(gen + " --out " + (dir / "b").string());
  const bool same = rs == 0 && r1 == 0 && r2 == 0 && same_tree(dir / "a", dir / "b");
  const int rst = sh(cli + " selftest");
  fs::remove_all(dir);
  return {same && rst == 0, std::string("generate ") + (same ? "byte-identical" : "differs or failed") +
                                "; selftest exit " + std::to_string(rst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", c1},      {"zero-init transparency", c2}, {"noising limits and statistics", c3},
      {"attention shape contract", c4},  {"oracle-sampler exactness", c5}, {"overfit regression", c6},
      {"ablation ordering", c7},         {"metric oracles", c8},          {"flow and curation", c9},
      {"coarse faster than fine", c10},  {"determinism", c11},
  };
  std::set<std::size_t> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::stoul(argv[i]));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!pick.empty() && !pick.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s C%zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
    all &= o.pass;
  }
  return all ? 0 : 1;
}
