// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "cascade4d/branch.hpp"
#include "cascade4d/denoiser.hpp"
#include "cascade4d/grid.hpp"
#include "cascade4d/params.hpp"

namespace c4d {

/// Cosine schedule: abar_t = cos^2(pi/2 * t/N), clamped to [1e-5, 1].
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::size_t steps = 50) : n_(steps) {
    if (steps == 0) throw ConfigError("schedule needs at least one step");
    abar_.resize(steps + 1);
    for (std::size_t t = 0; t <= steps; ++t) {
      const double c = std::cos(std::numbers::pi / 2.0 * static_cast<double>(t) / static_cast<double>(steps));
      abar_[t] = std::clamp(c * c, 1e-5, 1.0);
    }
  }

  std::size_t steps() const { return n_; }
  double alpha_bar(std::size_t t) const {
    check(t);
    return abar_[t];
  }
  double sqrt_alpha_bar(std::size_t t) const { return std::sqrt(alpha_bar(t)); }
  double sqrt_one_minus(std::size_t t) const { return std::sqrt(1.0 - alpha_bar(t)); }

 private:
  void check(std::size_t t) const {
    if (t > n_) throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(n_) + "]");
  }
  std::size_t n_;
  std::vector<double> abar_;
};

/// z_t = sqrt(abar) z0 + sqrt(1 - abar) eps.
inline Tensor add_noise_abar(const Tensor& z0, double abar, const Tensor& eps) {
  if (z0.shape() != eps.shape())
    throw ShapeError("add_noise: eps " + shape_str(eps.shape()) + " vs z0 " + shape_str(z0.shape()));
  if (!(abar >= 0.0 && abar <= 1.0)) throw ConfigError("add_noise: abar outside [0, 1]");
  const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

inline Tensor add_noise(const Tensor& z0, const NoiseSchedule& s, std::size_t t, const Tensor& eps) {
  return add_noise_abar(z0, s.alpha_bar(t), eps);
}

inline LatentGrid add_noise(const LatentGrid& z0, const NoiseSchedule& s, std::size_t t, const LatentGrid& eps) {
  return LatentGrid{add_noise(z0.values, s, t, eps.values), z0.view_ids};
}

/// Mean squared error over all elements.
inline double loss_eps(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) throw ShapeError("loss_eps shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Sampler

struct SamplerConfig {
  std::size_t steps = 10;
  /// Explicit visiting order; empty means evenly strided from t = 1.
  std::vector<std::size_t> timesteps;
  bool deterministic = true;

  std::vector<std::size_t> resolve(const NoiseSchedule& s) const {
    std::vector<std::size_t> ts = timesteps;
    if (ts.empty()) {
      if (steps == 0 || steps > s.steps()) throw ConfigError("sampler steps must be in [1, N]");
      const std::size_t stride = s.steps() / steps;
      for (std::size_t i = steps; i-- > 0;) ts.push_back(1 + i * stride);
    }
    if (ts.size() > s.steps()) throw ConfigError("more sampler steps than schedule steps");
    for (std::size_t i = 0; i < ts.size(); ++i) {
      if (ts[i] == 0 || ts[i] > s.steps()) throw ConfigError("sampler timestep outside [1, N]");
      if (i && ts[i] >= ts[i - 1]) throw ConfigError("sampler timesteps must strictly decrease");
    }
    if (!deterministic) throw ConfigError("only the deterministic sampler is implemented");
    return ts;
  }
};

using EpsFn = std::function<Tensor(const Tensor& z_t, std::size_t t)>;

/// Deterministic DDIM-form reverse process from z_start at the first
/// configured timestep down to t = 0.
inline Tensor ddim_sample(const EpsFn& eps_fn, Tensor z, const NoiseSchedule& s, const SamplerConfig& cfg,
                          std::size_t* evaluations = nullptr) {
  const auto ts = cfg.resolve(s);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const std::size_t t = ts[i], tn = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Tensor e = eps_fn(z, t);
    if (evaluations) ++*evaluations;
    if (e.shape() != z.shape()) throw ShapeError("denoiser returned " + shape_str(e.shape()));
    const double a = s.sqrt_alpha_bar(t), b = s.sqrt_one_minus(t);
    const double an = s.sqrt_alpha_bar(tn), bn = s.sqrt_one_minus(tn);
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double x0 = (z[k] - b * e[k]) / a;
      z[k] = an * x0 + bn * e[k];
    }
    if (!z.all_finite()) throw NumericalError("non-finite latent at sampler step t=" + std::to_string(t));
  }
  return z;
}

inline Tensor initial_noise(const Shape& shape, std::uint64_t seed, std::uint64_t stream = 0x5A3D) {
  return Tensor::randn(shape, CounterRng(seed, stream));
}

// ---------------------------------------------------------------------------
// Training

struct NoiseDraw {
  std::size_t t = 1;
  Tensor eps;
};

/// t uniform over [1, N], eps standard normal, both keyed by (seed, step).
inline NoiseDraw draw_noise(const NoiseSchedule& s, const Shape& shape, std::uint64_t seed, std::uint64_t step) {
  RngStream r(seed, mix_keys(step, 0x7157));
  NoiseDraw d;
  d.t = 1 + static_cast<std::size_t>(r.below(s.steps()));
  d.eps = Tensor::randn(shape, CounterRng(seed, mix_keys(step, 0xE95)));
  return d;
}

struct StepResult {
  double loss = 0.0;
  std::size_t t = 0;
  std::map<std::string, Tensor> grads;
};

/// One stage-1 training sample: a full low-resolution grid and its conditions.
struct Stage1Batch {
  Tensor z0;  // [T, V, Z, h, w]
  Tensor cf;  // [T, Z, h, w]
  Tensor cv;  // [V, Z, h, w]
  std::vector<double> azimuths;
  std::vector<double> frame_pos;
};

/// One stage-2 training sample: a high-resolution view subset with the
/// matching layout condition.
struct Stage2Batch {
  Tensor z0;      // [T, V', Z, H, W]
  Tensor layout;  // [T, V', Z, H, W]
  Tensor cf;      // [T, Z, H, W]
  Tensor cv;      // [V', Z, H, W]
  std::vector<double> azimuths;
  std::vector<double> frame_pos;
  std::vector<std::size_t> target_views;
  std::vector<std::size_t> layout_views;
};

inline std::vector<double> default_frame_positions(std::size_t T) {
  std::vector<double> f(T);
  for (std::size_t t = 0; t < T; ++t) f[t] = static_cast<double>(t);
  return f;
}

inline void check_partition(const ParameterStore& ps, const std::set<std::string>& trainable, Partition want,
                            const char* stage) {
  for (const auto& n : trainable)
    if (ps.partition(n) != want)
      throw ConfigError(std::string(stage) + ": parameter " + n + " is tagged " + partition_name(ps.partition(n)) +
                        ", only " + partition_name(want) + " may train");
}

/// Builds the stage-1 loss on `tape`; exposed for gradient checks.
inline Var stage1_loss(Binder& P, const DenoiserConfig& dc, const NoiseSchedule& s, const Stage1Batch& b, const Tensor& z_t,
                       std::size_t t, const Tensor& eps) {
  Tape& tape = P.tape();
  DenoiseArgs a{tape.constant(z_t), tape.constant(b.cf), tape.constant(b.cv), static_cast<double>(t),
                b.azimuths,         b.frame_pos,        nullptr,           true};
  a.alpha_bar = s.alpha_bar(t);
  return mse(denoise(P, dc, a), tape.constant(eps));
}

inline StepResult train_step_stage1(const Stage1Batch& b, const ParameterStore& ps, const DenoiserConfig& dc,
                                    const NoiseSchedule& s, const NoiseDraw& nd,
                                    const std::set<std::string>& trainable) {
  check_partition(ps, trainable, Partition::lora, "stage 1");
  Tape tape(true);
  Binder P(tape, ps, &trainable);
  const Tensor z_t = add_noise(b.z0, s, nd.t, nd.eps);
  Var loss = stage1_loss(P, dc, s, b, z_t, nd.t, nd.eps);
  StepResult r{loss.value().item(), nd.t, {}};
  if (!trainable.empty()) r.grads = tape.backward(loss);
  return r;
}

/// Unconditioned-by-layout base objective (no adapters, no branch); stands
/// in for the pretrained backbone.
inline StepResult train_step_base(const Stage1Batch& b, const ParameterStore& ps, const DenoiserConfig& dc,
                                  const NoiseSchedule& s, const NoiseDraw& nd, const std::set<std::string>& trainable) {
  check_partition(ps, trainable, Partition::base, "base pretraining");
  Tape tape(true);
  Binder P(tape, ps, &trainable);
  const Tensor z_t = add_noise(b.z0, s, nd.t, nd.eps);
  DenoiseArgs a{tape.constant(z_t), tape.constant(b.cf), tape.constant(b.cv), static_cast<double>(nd.t),
                b.azimuths,         b.frame_pos,        nullptr,            false};
  a.alpha_bar = s.alpha_bar(nd.t);
  Var loss = mse(denoise(P, dc, a), tape.constant(nd.eps));
  StepResult r{loss.value().item(), nd.t, {}};
  if (!trainable.empty()) r.grads = tape.backward(loss);
  return r;
}

inline Var stage2_loss(Binder& P, const DenoiserConfig& dc, const BranchConfig& bc, const NoiseSchedule& s,
                       const Stage2Batch& b,
                       const Tensor& z_t, std::size_t t, const Tensor& eps, bool with_branch = true) {
  Tape& tape = P.tape();
  Var z = tape.constant(z_t);
  Injections inj;
  if (with_branch) {
    BranchArgs ba{tape.constant(b.layout), tape.constant(b.cf), std::nullopt, nullptr};
    ba.z_t = z;
    ba.t = static_cast<double>(t);
    inj = branch_forward(P, dc, bc, ba);
  }
  DenoiseArgs a{z, tape.constant(b.cf), tape.constant(b.cv), static_cast<double>(t), b.azimuths, b.frame_pos,
                with_branch ? &inj : nullptr, false};
  a.alpha_bar = s.alpha_bar(t);
  return mse(denoise(P, dc, a), tape.constant(eps));
}

inline StepResult train_step_stage2(const Stage2Batch& b, const ParameterStore& ps, const DenoiserConfig& dc,
                                    const BranchConfig& bc, const NoiseSchedule& s, const NoiseDraw& nd,
                                    const std::set<std::string>& trainable) {
  if (b.layout_views != b.target_views) throw ConfigError("stage 2: layout and target view indices differ");
  if (b.layout.shape() != b.z0.shape()) throw ShapeError("stage 2: layout and target shapes differ");
  check_partition(ps, trainable, Partition::branch, "stage 2");
  Tape tape(true);
  Binder P(tape, ps, &trainable);
  const Tensor z_t = add_noise(b.z0, s, nd.t, nd.eps);
  Var loss = stage2_loss(P, dc, bc, s, b, z_t, nd.t, nd.eps);
  StepResult r{loss.value().item(), nd.t, {}};
  if (!trainable.empty()) r.grads = tape.backward(loss);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Gradient descent with optional first-moment smoothing:
/// m <- beta m + g; p <- p - lr m.
/// SGD with heavy-ball momentum, or Adam when adaptive is set (momentum is
/// then beta1).
class Optimizer {
 public:
  Optimizer(double lr, double momentum = 0.0, bool adaptive = false) : lr_(lr), beta_(momentum), adaptive_(adaptive) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  }

  void set_lr(double lr) {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    lr_ = lr;
  }
  double lr() const { return lr_; }

  void step(ParameterStore& ps, const std::map<std::string, Tensor>& grads) {
    ++count_;
    const double c1 = 1.0 - std::pow(beta_, static_cast<double>(count_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(count_));
    for (const auto& [name, g] : grads) {
      Tensor& p = ps.mut(name);
      if (p.shape() != g.shape()) throw ShapeError("gradient shape mismatch for " + name);
      Tensor& m = moment_.try_emplace(name, Tensor(g.shape())).first->second;
      if (adaptive_) {
        Tensor& v = second_.try_emplace(name, Tensor(g.shape())).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = beta_ * m[i] + (1.0 - beta_) * g[i];
          v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
          p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
        }
      } else {
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = beta_ * m[i] + g[i];
          p[i] -= lr_ * m[i];
        }
      }
      if (!p.all_finite()) throw NumericalError("parameter " + name + " diverged");
    }
  }

 private:
  static constexpr double kBeta2 = 0.999;
  double lr_, beta_;
  bool adaptive_;
  std::size_t count_ = 0;
  std::map<std::string, Tensor> moment_, second_;
};

}  // namespace c4d
