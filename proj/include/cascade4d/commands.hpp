// SPDX-License-Identifier: Apache-2.0
#pragma once

// Subcommand bodies behind the cascade4d executable.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cascade4d/cascade.hpp"
#include "cascade4d/config.hpp"
#include "cascade4d/eval.hpp"
#include "cascade4d/forge.hpp"
#include "cascade4d/grid_io.hpp"
#include "cascade4d/manifest.hpp"
#include "cascade4d/trainer.hpp"

namespace c4d {

/// Subdirectories holding a saved grid, sorted by name.
inline std::vector<fs::path> grid_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "meta.txt")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Brings a square grid to `res` by box downsampling.
inline ImageGrid at_resolution(const ImageGrid& g, std::size_t res) {
  if (g.height() != g.width()) throw ShapeError("grids must be square");
  if (g.height() == res) return g;
  if (g.height() < res || g.height() % res)
    throw ShapeError("grid resolution " + std::to_string(g.height()) + " cannot be reduced to " + std::to_string(res));
  return downsample_grid(g, g.height() / res);
}

inline void check_views(const ImageGrid& g, const RunConfig& c, const std::string& what) {
  if (g.views() != c.views)
    throw ShapeError(what + " has " + std::to_string(g.views()) + " views, config expects " + std::to_string(c.views));
}

inline void write_loss_log(const fs::path& p, const std::vector<double>& losses) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  for (std::size_t k = 0; k < losses.size(); ++k) os << k << "\t" << format_double(losses[k]) << "\n";
}

// ---------------------------------------------------------------------------

/// Renders the designed curation corpus; returns the sample ids.
inline std::vector<std::string> cmd_synth(const RunConfig& c, const fs::path& out) {
  std::vector<std::string> ids;
  std::ofstream index;
  fs::create_directories(out);
  index.open(out / "kinds.tsv");
  if (!index) throw DataError("cannot write " + (out / "kinds.tsv").string());
  for (std::size_t i = 0; i < c.synth_count; ++i) {
    const CorpusSample s = render_corpus_sample(i, c.seed, c.synth_frames, c.views, c.synth_res);
    save_grid(s.grid, out / s.id);
    index << s.id << "\t" << sample_kind_name(s.kind) << "\n";
    ids.push_back(s.id);
  }
  return ids;
}

inline Manifest cmd_filter(const RunConfig& c, const fs::path& corpus, const fs::path& manifest_path) {
  const FilterConfig fc = c.filter();
  const CompletenessScorer scorer = make_scorer(fc.scorer);
  Manifest m;
  for (const auto& dir : grid_dirs(corpus)) {
    const ImageGrid g = load_grid(dir);
    const FilterReport r = filter_sample(g, fc, scorer);
    std::vector<std::string> paths;
    for (std::size_t v = 0; v < g.views(); ++v) paths.push_back((dir / view_file_name(v)).string());
    m.records.push_back(manifest_record(dir.filename().string(), paths, g, r));
  }
  if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());
  save_manifest(m, manifest_path);
  return m;
}

/// Accepted samples of a manifest, at the configured fine resolution.
inline std::vector<ImageGrid> load_accepted(const RunConfig& c, const fs::path& manifest_path) {
  const Manifest m = load_manifest(manifest_path);
  std::vector<ImageGrid> out;
  for (const auto& r : m.records) {
    if (!r.accepted) continue;
    if (r.view_paths.empty()) throw DataError("manifest row " + r.id + " lists no views");
    ImageGrid g = at_resolution(load_grid(fs::path(r.view_paths[0]).parent_path()), c.fine_res);
    check_views(g, c, r.id);
    out.push_back(std::move(g));
  }
  if (out.empty()) throw DataError("manifest " + manifest_path.string() + " has no accepted samples");
  return out;
}

inline ParameterStore fresh_parameters(const RunConfig& c) {
  ParameterStore ps;
  init_denoiser(ps, c.denoiser(), c.init_seed);
  return ps;
}

inline bool has_branch(const ParameterStore& ps) { return !ps.names(Partition::branch).empty(); }

/// Base pretraining (unless `init` is given) followed by adapter training.
inline ParameterStore cmd_train_stage1(const RunConfig& c, const fs::path& manifest, const fs::path& out,
                                       const std::optional<fs::path>& init) {
  const auto data = load_accepted(c, manifest);
  const DenoiserConfig dc = c.denoiser();
  const CodecSpec codec = c.codec();
  const NoiseSchedule s = c.schedule();
  ParameterStore ps = init ? load_checkpoint(*init) : fresh_parameters(c);
  fs::create_directories(out);
  if (!init && c.base_steps > 0) {
    RngStream pick(c.seed, 0xBA5E);
    TrainOptions o = c.train(c.base_steps, c.base_lr, 0);
    o.adam = false;
    o.cosine_decay = false;
    const auto losses = train_base(ps, dc, s, [&](std::size_t k) {
      return make_view_batch(data[k % data.size()], sample_training_views(c.views, c.subset, pick), codec);
    }, o);
    write_loss_log(out / "base_loss.txt", losses);
  }
  std::vector<Stage1Batch> batches;
  for (const auto& g : data) batches.push_back(make_stage1_batch(g, c.coarse_res, codec));
  TrainOptions o = c.train(c.stage1_steps, c.stage1_lr, 1);
  o.timesteps = c.pipeline().stage1_sampler.resolve(s);
  write_loss_log(out / "loss.txt", train_stage1(ps, dc, s, batches, o));
  save_checkpoint(ps, out);
  return ps;
}

inline ParameterStore cmd_train_stage2(const RunConfig& c, const fs::path& manifest, const fs::path& out,
                                       const fs::path& init) {
  const auto data = load_accepted(c, manifest);
  const DenoiserConfig dc = c.denoiser();
  const BranchConfig bc = c.branch();
  const CodecSpec codec = c.codec();
  const NoiseSchedule s = c.schedule();
  ParameterStore ps = load_checkpoint(init);
  if (!has_branch(ps)) init_branch(ps, dc, bc, mix_keys(c.init_seed, 2));
  RngStream pick(c.seed, 0x57A2);
  TrainOptions o = c.train(c.stage2_steps, c.stage2_lr, 2);
  o.timesteps = c.pipeline().stage2_sampler.resolve(s);
  const auto losses = train_stage2(ps, dc, bc, s, [&](std::size_t) {
    const ImageGrid& g = data[pick.below(data.size())];
    return make_stage2_batch(g, sample_training_views(c.views, c.subset, pick), c.coarse_res, codec);
  }, o);
  fs::create_directories(out);
  write_loss_log(out / "loss.txt", losses);
  save_checkpoint(ps, out);
  return ps;
}

/// Runs the cascade on the reference video (view 0 of `input`) and the
/// reference views (frame 0 of `input`). The run report goes next to `out`.
inline RunReport cmd_generate(const RunConfig& c, const fs::path& input, const fs::path& out,
                              const std::optional<fs::path>& checkpoint, bool extend) {
  const DenoiserConfig dc = c.denoiser();
  const BranchConfig bc = c.branch();
  ParameterStore ps = checkpoint ? load_checkpoint(*checkpoint) : fresh_parameters(c);
  if (!has_branch(ps)) init_branch(ps, dc, bc, mix_keys(c.init_seed, 2));
  const ImageGrid g = at_resolution(load_grid(input), c.fine_res);
  check_views(g, c, input.string());
  const std::size_t want = extend ? c.target_length : c.window;
  if (g.frames() != want)
    throw ShapeError(input.string() + " has " + std::to_string(g.frames()) + " frames, expected " + std::to_string(want));
  Cascade cas{c.pipeline(), c.codec(), c.schedule(), denoiser_model(ps, dc, true), branch_model(ps, dc, bc), {}, {}};
  const ImageGrid ref_video = slice_views(g, {0}), ref_views = slice_frames(g, {0});
  const ImageGrid result = extend ? cas.extend_anchored(ref_video, ref_views, c.seed) : cas.run(ref_video, ref_views, c.seed);
  if (fs::exists(out)) fs::remove_all(out);
  save_grid(result, out);
  RunReport rep{c.seed, c.hash(), cas.stats1, cas.stats2, {}};
  rep.extra = {{"mode", extend ? "extend" : "window"},
               {"frames", std::to_string(result.frames())},
               {"views", std::to_string(result.views())},
               {"checkpoint", checkpoint ? checkpoint->string() : "fresh"}};
  rep.save(out.string() + ".report.txt");
  return rep;
}

inline std::vector<ImageGrid> load_grid_set(const fs::path& root) {
  std::vector<ImageGrid> out;
  for (const auto& d : grid_dirs(root)) out.push_back(load_grid(d));
  return out;
}

inline std::string cmd_eval(const RunConfig& c, const fs::path& gen_dir, const fs::path& ref_dir,
                            const std::optional<fs::path>& out) {
  const auto gen = load_grid_set(gen_dir), ref = load_grid_set(ref_dir);
  const FeatureExtractor fx = latent_stats_extractor(c.codec());
  const std::size_t ng = gen.size(), nr = ref.size();
  std::vector<EvalRow> rows = {
      {"fvd_f", format_double(fvd_f(gen, ref, fx)), ng, nr},
      {"fvd_v", format_double(fvd_v(gen, ref, fx)), ng, nr},
      {"fvd_diag", format_double(fvd_diag(gen, ref, fx)), ng, nr},
      {"perceptual", format_double(mean_perceptual(gen, ref)), ng, nr},
  };
  std::vector<Tensor> fronts;
  for (const auto& g : gen) fronts.push_back(grid_cell(g, 0, 0));
  const std::optional<std::string> cmd = c.clip_scorer.empty() ? std::nullopt : std::optional(c.clip_scorer);
  const ScorerResult clip = clip_score(fronts, cmd);
  rows.push_back({"clip_s", clip.text(), clip.available ? clip.count : 0, 0});
  const std::string text = eval_report(rows, fx.name, c.hash());
  if (out) {
    if (out->has_parent_path()) fs::create_directories(out->parent_path());
    std::ofstream os(*out);
    if (!os) throw DataError("cannot write " + out->string());
    os << text;
  }
  return text;
}

}  // namespace c4d
