// SPDX-License-Identifier: Apache-2.0
#pragma once

// Batch construction from image grids and the two training loops.

#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cascade4d/cascade.hpp"

namespace c4d {

/// Stage-1 batch: the whole grid at coarse resolution, the front-view video
/// as c_f and the first-frame views as c_v.
inline Stage1Batch make_stage1_batch(const ImageGrid& fine, std::size_t coarse_res, const CodecSpec& codec) {
  if (fine.height() % coarse_res || fine.width() != fine.height())
    throw ShapeError("grid resolution " + std::to_string(fine.height()) + " is not a multiple of " + std::to_string(coarse_res));
  const ImageGrid g = downsample_grid(fine, fine.height() / coarse_res);
  Stage1Batch b;
  b.z0 = encode(g, codec).values;
  b.cf = encode_frames(view_sequence(g, 0), codec);
  b.cv = encode_frames(frame_sequence(g, 0), codec);
  b.azimuths = g.azimuths();
  b.frame_pos = default_frame_positions(g.frames());
  return b;
}

/// Stage-2 batch over a view subset: fine targets, the coarse layout of the
/// same views brought back to fine resolution, fine c_f and c_v.
/// Stage-1 style batch over a view subset at full resolution.
inline Stage1Batch make_view_batch(const ImageGrid& g, const std::vector<std::size_t>& views, const CodecSpec& codec) {
  const ImageGrid sub = slice_views(g, views);
  Stage1Batch b;
  b.z0 = encode(sub, codec).values;
  b.cf = encode_frames(view_sequence(g, 0), codec);
  b.cv = encode_frames(frame_sequence(sub, 0), codec);
  b.azimuths = sub.azimuths();
  b.frame_pos = default_frame_positions(sub.frames());
  return b;
}

inline Stage2Batch make_stage2_batch(const ImageGrid& fine, const std::vector<std::size_t>& views,
                                     std::size_t coarse_res, const CodecSpec& codec) {
  const std::size_t f = fine.height() / coarse_res;
  if (fine.height() % coarse_res) throw ShapeError("fine resolution is not a multiple of the coarse resolution");
  const ImageGrid sub = slice_views(fine, views);
  Stage2Batch b;
  b.z0 = encode(sub, codec).values;
  b.layout = encode(upsample_grid(downsample_grid(sub, f), f), codec).values;
  b.cf = encode_frames(view_sequence(fine, 0), codec);
  b.cv = encode_frames(frame_sequence(sub, 0), codec);
  b.azimuths = sub.azimuths();
  b.frame_pos = default_frame_positions(sub.frames());
  b.target_views = views;
  b.layout_views = views;
  return b;
}

struct TrainOptions {
  std::size_t steps = 100;
  double lr = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Reuse the step-0 noise draw every step (single-sample overfitting).
  bool fixed_noise = false;
  /// Adam instead of momentum SGD.
  bool adam = false;
  /// Restrict t to these values when non-empty.
  std::vector<std::size_t> timesteps;
  /// Anneal the learning rate from lr to 0 along a half cosine.
  bool cosine_decay = false;
};

using LossLog = std::function<void(std::size_t step, double loss, std::size_t t)>;

namespace detail {

inline NoiseDraw training_draw(const NoiseSchedule& s, const Shape& shape, const TrainOptions& o, std::size_t step) {
  const std::uint64_t key = o.fixed_noise ? 0 : step;
  NoiseDraw d = draw_noise(s, shape, o.seed, key);
  if (!o.timesteps.empty()) d.t = o.timesteps[RngStream(o.seed, mix_keys(key, 0x75)).below(o.timesteps.size())];
  return d;
}

inline double scheduled_lr(const TrainOptions& o, std::size_t step) {
  if (!o.cosine_decay || o.steps == 0) return o.lr;
  return 0.5 * o.lr * (1.0 + std::cos(std::acos(-1.0) * static_cast<double>(step) / static_cast<double>(o.steps)));
}

}  // namespace detail

/// LoRA-only training over the given batches, cycled in order.
inline std::vector<double> train_stage1(ParameterStore& ps, const DenoiserConfig& dc, const NoiseSchedule& s,
                                        const std::vector<Stage1Batch>& batches, const TrainOptions& o,
                                        const LossLog& log = {}) {
  if (batches.empty()) throw DataError("stage 1 training needs at least one sample");
  const auto trainable = ps.names(Partition::lora);
  Optimizer opt(o.lr, o.momentum, o.adam);
  std::vector<double> losses;
  for (std::size_t k = 0; k < o.steps; ++k) {
    const Stage1Batch& b = batches[k % batches.size()];
    const NoiseDraw nd = detail::training_draw(s, b.z0.shape(), o, k);
    StepResult r = train_step_stage1(b, ps, dc, s, nd, trainable);
    if (!std::isfinite(r.loss)) throw NumericalError("stage 1 loss is not finite at step " + std::to_string(k));
    opt.set_lr(detail::scheduled_lr(o, k));
    opt.step(ps, r.grads);
    losses.push_back(r.loss);
    if (log) log(k, r.loss, r.t);
  }
  return losses;
}

/// Full base-parameter training, cycling batches; used to obtain a frozen
/// backbone before the adapter stages.
inline std::vector<double> train_base(ParameterStore& ps, const DenoiserConfig& dc, const NoiseSchedule& s,
                                      const std::function<Stage1Batch(std::size_t)>& make_batch, const TrainOptions& o,
                                      const LossLog& log = {}) {
  const auto trainable = ps.names(Partition::base);
  Optimizer opt(o.lr, o.momentum, o.adam);
  std::vector<double> losses;
  for (std::size_t k = 0; k < o.steps; ++k) {
    const Stage1Batch b = make_batch(k);
    const NoiseDraw nd = detail::training_draw(s, b.z0.shape(), o, k);
    StepResult r = train_step_base(b, ps, dc, s, nd, trainable);
    if (!std::isfinite(r.loss)) throw NumericalError("base loss is not finite at step " + std::to_string(k));
    opt.set_lr(detail::scheduled_lr(o, k));
    opt.step(ps, r.grads);
    losses.push_back(r.loss);
    if (log) log(k, r.loss, r.t);
  }
  return losses;
}

/// Branch-only training; `make_batch(step)` supplies the view-subset batch.
inline std::vector<double> train_stage2(ParameterStore& ps, const DenoiserConfig& dc, const BranchConfig& bc,
                                        const NoiseSchedule& s, const std::function<Stage2Batch(std::size_t)>& make_batch,
                                        const TrainOptions& o, const LossLog& log = {}) {
  const auto trainable = ps.names(Partition::branch);
  if (trainable.empty()) throw ConfigError("stage 2 training needs an initialized branch");
  Optimizer opt(o.lr, o.momentum, o.adam);
  std::vector<double> losses;
  for (std::size_t k = 0; k < o.steps; ++k) {
    const Stage2Batch b = make_batch(k);
    const NoiseDraw nd = detail::training_draw(s, b.z0.shape(), o, k);
    StepResult r = train_step_stage2(b, ps, dc, bc, s, nd, trainable);
    if (!std::isfinite(r.loss)) throw NumericalError("stage 2 loss is not finite at step " + std::to_string(k));
    opt.set_lr(detail::scheduled_lr(o, k));
    opt.step(ps, r.grads);
    losses.push_back(r.loss);
    if (log) log(k, r.loss, r.t);
  }
  return losses;
}

inline double mean_abs_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("error shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace c4d
