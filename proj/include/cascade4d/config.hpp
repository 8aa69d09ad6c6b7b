// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat key=value run configuration shared by every subcommand.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cascade4d/branch.hpp"
#include "cascade4d/cascade.hpp"
#include "cascade4d/codec.hpp"
#include "cascade4d/denoiser.hpp"
#include "cascade4d/forge.hpp"
#include "cascade4d/grid_io.hpp"
#include "cascade4d/rng.hpp"
#include "cascade4d/trainer.hpp"

namespace c4d {

struct RunConfig {
  std::uint64_t seed = 0;

  // pipeline
  std::size_t coarse_res = 32;
  std::size_t fine_res = 64;
  std::size_t window = 5;
  std::size_t views = 16;
  std::size_t subset = 4;
  std::size_t target_length = 21;
  std::size_t anchor_stride = 5;
  std::size_t schedule_steps = 50;
  std::size_t stage1_sampler_steps = 10;
  std::size_t stage2_sampler_steps = 10;

  // codec
  std::size_t codec_patch = 4;
  std::uint64_t codec_seed = 7;

  // denoiser
  std::size_t base_channels = 32;
  std::size_t levels = 2;
  std::size_t heads = 4;
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  std::size_t embed_width = 64;
  std::size_t groups = 8;
  double residual_gain = 0.2;
  std::string prediction = "v";
  std::uint64_t init_seed = 1;

  // branch
  std::string branch_variant = "full";
  std::string map_orientation = "reference";
  std::size_t map_heads = 1;

  // training; `optimizer` and `lr_schedule` cover the adapter stages, base
  // pretraining is always constant-rate momentum SGD
  std::string optimizer = "adam";
  std::string lr_schedule = "cosine";
  double momentum = 0.9;
  std::size_t base_steps = 300;
  double base_lr = 0.05;
  std::size_t stage1_steps = 500;
  double stage1_lr = 0.005;
  std::size_t stage2_steps = 500;
  double stage2_lr = 0.005;

  // data forge
  double filter_tau_p = 0.35;
  double filter_flow_lo = 0.2;
  double filter_flow_hi = 4.0;
  std::string completeness_scorer = "accept-all";
  std::size_t synth_count = 10;
  std::size_t synth_frames = 5;
  std::size_t synth_res = 64;

  // evaluation
  std::string clip_scorer;  // empty: unavailable

  // paths
  std::string data_dir = "data";
  std::string manifest = "data/manifest.tsv";
  std::string checkpoint = "checkpoints";

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.coarse_res = coarse_res;
    p.fine_res = fine_res;
    p.window = window;
    p.views = views;
    p.subset = subset;
    p.target_length = target_length;
    p.anchor_stride = anchor_stride;
    p.stage1_sampler.steps = stage1_sampler_steps;
    p.stage2_sampler.steps = stage2_sampler_steps;
    return p;
  }

  CodecSpec codec() const { return CodecSpec(codec_patch, codec_seed); }
  NoiseSchedule schedule() const { return NoiseSchedule(schedule_steps); }

  DenoiserConfig denoiser() const {
    DenoiserConfig d;
    d.latent_channels = 3 * codec_patch * codec_patch;
    d.base_channels = base_channels;
    d.levels = levels;
    d.heads = heads;
    d.lora_rank = lora_rank;
    d.lora_scale = lora_scale;
    d.embed_width = embed_width;
    d.groups = groups;
    d.residual_gain = residual_gain;
    d.prediction = parse_prediction(prediction);
    return d;
  }

  BranchConfig branch() const {
    BranchConfig b;
    b.variant = parse_branch_variant(branch_variant);
    if (map_orientation == "reference")
      b.orientation = MapOrientation::reference_as_query;
    else if (map_orientation == "feature")
      b.orientation = MapOrientation::feature_as_query;
    else
      throw ConfigError("map_orientation must be 'reference' or 'feature'");
    b.map_heads = map_heads;
    return b;
  }

  FilterConfig filter() const { return FilterConfig{filter_tau_p, filter_flow_lo, filter_flow_hi, completeness_scorer}; }

  TrainOptions train(std::size_t steps, double lr, std::uint64_t stream) const {
    TrainOptions o;
    o.steps = steps;
    o.lr = lr;
    o.momentum = momentum;
    o.seed = mix_keys(seed, stream);
    o.adam = optimizer == "adam";
    o.cosine_decay = lr_schedule == "cosine";
    return o;
  }

  /// Throws ConfigError on any inconsistent value.
  void validate() const {
    pipeline().validate();
    if (codec_patch == 0) throw ConfigError("codec_patch must be positive");
    if (coarse_res % codec_patch) throw ConfigError("coarse_res must be a multiple of codec_patch");
    const DenoiserConfig d = denoiser();
    d.validate();
    if ((coarse_res / codec_patch) % d.spatial_multiple())
      throw ConfigError("coarse latent extent incompatible with the denoiser depth");
    const BranchConfig b = branch();
    if (b.map_heads == 0 || base_channels % b.map_heads) throw ConfigError("map_heads must divide base_channels");
    if (schedule_steps == 0) throw ConfigError("schedule_steps must be positive");
    pipeline().stage1_sampler.resolve(schedule());
    pipeline().stage2_sampler.resolve(schedule());
    if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be 'adam' or 'sgd'");
    if (lr_schedule != "cosine" && lr_schedule != "constant")
      throw ConfigError("lr_schedule must be 'cosine' or 'constant'");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    for (double lr : {base_lr, stage1_lr, stage2_lr})
      if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
    filter().validate();
    if (synth_frames == 0 || synth_res == 0) throw ConfigError("synth_frames and synth_res must be positive");
  }

  std::string serialize() const;
  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(serialize())));
    return buf;
  }
};

namespace detail {

struct ConfigField {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end || s.empty()) throw ConfigError("invalid value '" + s + "' for " + key);
  return v;
}

template <>
inline double parse_number<double>(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(v)) throw ConfigError("invalid value '" + s + "' for " + key);
  return v;
}

template <typename T>
ConfigField field(const char* key, T RunConfig::*m) {
  if constexpr (std::is_same_v<T, std::string>) {
    return {key, [m](const RunConfig& c) { return c.*m; }, [m](RunConfig& c, const std::string& v) { c.*m = v; }};
  } else if constexpr (std::is_same_v<T, double>) {
    return {key, [m](const RunConfig& c) { return format_double(c.*m); },
            [m, key](RunConfig& c, const std::string& v) { c.*m = parse_number<double>(key, v); }};
  } else {
    return {key, [m](const RunConfig& c) { return std::to_string(c.*m); },
            [m, key](RunConfig& c, const std::string& v) {
              if (!v.empty() && v[0] == '-') throw ConfigError("invalid value '" + v + "' for " + key);
              c.*m = parse_number<T>(key, v);
            }};
  }
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> f = {
      field("seed", &RunConfig::seed),
      field("coarse_res", &RunConfig::coarse_res),
      field("fine_res", &RunConfig::fine_res),
      field("window", &RunConfig::window),
      field("views", &RunConfig::views),
      field("subset", &RunConfig::subset),
      field("target_length", &RunConfig::target_length),
      field("anchor_stride", &RunConfig::anchor_stride),
      field("schedule_steps", &RunConfig::schedule_steps),
      field("stage1_sampler_steps", &RunConfig::stage1_sampler_steps),
      field("stage2_sampler_steps", &RunConfig::stage2_sampler_steps),
      field("codec_patch", &RunConfig::codec_patch),
      field("codec_seed", &RunConfig::codec_seed),
      field("base_channels", &RunConfig::base_channels),
      field("levels", &RunConfig::levels),
      field("heads", &RunConfig::heads),
      field("lora_rank", &RunConfig::lora_rank),
      field("lora_scale", &RunConfig::lora_scale),
      field("embed_width", &RunConfig::embed_width),
      field("groups", &RunConfig::groups),
      field("residual_gain", &RunConfig::residual_gain),
      field("prediction", &RunConfig::prediction),
      field("init_seed", &RunConfig::init_seed),
      field("branch_variant", &RunConfig::branch_variant),
      field("map_orientation", &RunConfig::map_orientation),
      field("map_heads", &RunConfig::map_heads),
      field("optimizer", &RunConfig::optimizer),
      field("lr_schedule", &RunConfig::lr_schedule),
      field("momentum", &RunConfig::momentum),
      field("base_steps", &RunConfig::base_steps),
      field("base_lr", &RunConfig::base_lr),
      field("stage1_steps", &RunConfig::stage1_steps),
      field("stage1_lr", &RunConfig::stage1_lr),
      field("stage2_steps", &RunConfig::stage2_steps),
      field("stage2_lr", &RunConfig::stage2_lr),
      field("filter_tau_p", &RunConfig::filter_tau_p),
      field("filter_flow_lo", &RunConfig::filter_flow_lo),
      field("filter_flow_hi", &RunConfig::filter_flow_hi),
      field("completeness_scorer", &RunConfig::completeness_scorer),
      field("synth_count", &RunConfig::synth_count),
      field("synth_frames", &RunConfig::synth_frames),
      field("synth_res", &RunConfig::synth_res),
      field("clip_scorer", &RunConfig::clip_scorer),
      field("data_dir", &RunConfig::data_dir),
      field("manifest", &RunConfig::manifest),
      field("checkpoint", &RunConfig::checkpoint),
  };
  return f;
}

}  // namespace detail

inline std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

/// Applies one key=value override.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields())
    if (key == f.key) return f.set(c, value);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Defaults overlaid with the file's keys, then validated.
inline RunConfig parse_config(std::istream& is, const std::string& what = "config") {
  RunConfig c;
  std::map<std::string, std::string> kv;
  try {
    kv = parse_key_values(is, what);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [k, v] : kv) set_config_value(c, k, v);
  c.validate();
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline RunConfig load_config(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot read config " + p.string());
  return parse_config(is, p.string());
}

}  // namespace c4d
