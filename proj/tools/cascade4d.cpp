// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "cascade4d/commands.hpp"
#include "cascade4d/selftest.hpp"

using namespace c4d;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c, bool out_required) {
  app->add_option("--config", c.config, "key=value config file");
  app->add_option("--seed", c.seed, "overrides the config seed");
  auto* o = app->add_option("--out", c.out, "output location");
  if (out_required) o->required();
  app->add_option("--set", c.sets, "key=value override, repeatable");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? RunConfig{} : load_config(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(rc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) rc.seed = *c.seed;
  rc.validate();
  return rc;
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const ScorerError*>(&e)) return 5;
  return 1;
}

std::optional<fs::path> opt_path(const std::string& s) {
  return s.empty() ? std::nullopt : std::optional<fs::path>(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine multi-view video generation toolkit"};
  app.require_subcommand(1);

  Common synth_o, filter_o, t1_o, t2_o, gen_o, eval_o;
  std::string corpus, manifest, init, checkpoint, input, gen_dir, ref_dir;
  bool extend = false;

  auto* synth = app.add_subcommand("synth", "render the synthetic curation corpus");
  add_common(synth, synth_o, true);

  auto* filter = app.add_subcommand("filter", "score a corpus and write a manifest");
  add_common(filter, filter_o, true);
  filter->add_option("--corpus", corpus, "directory of grid subdirectories")->required();

  auto* t1 = app.add_subcommand("train-stage1", "base pretraining plus adapter training");
  add_common(t1, t1_o, true);
  t1->add_option("--manifest", manifest, "curated manifest")->required();
  t1->add_option("--init", init, "start from this checkpoint and skip base pretraining");

  auto* t2 = app.add_subcommand("train-stage2", "structure branch training");
  add_common(t2, t2_o, true);
  t2->add_option("--manifest", manifest, "curated manifest")->required();
  t2->add_option("--init", init, "stage-1 checkpoint")->required();

  auto* gen = app.add_subcommand("generate", "run the two-stage cascade");
  add_common(gen, gen_o, true);
  gen->add_option("--input", input, "grid supplying the reference video (view 0) and views (frame 0)")->required();
  gen->add_option("--checkpoint", checkpoint, "parameters; freshly initialized when absent");
  gen->add_flag("--extend-21", extend, "anchor-sample the full-length video");

  auto* ev = app.add_subcommand("eval", "FVD-F/V/Diag, perceptual distance and CLIP-S");
  add_common(ev, eval_o, false);
  ev->add_option("--gen", gen_dir, "generated grid set")->required();
  ev->add_option("--ref", ref_dir, "reference grid set")->required();

  auto* st = app.add_subcommand("selftest", "gradient checks and invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      const auto ids = cmd_synth(resolve(synth_o), synth_o.out);
      std::printf("wrote %zu samples to %s\n", ids.size(), synth_o.out.c_str());
    } else if (filter->parsed()) {
      const Manifest m = cmd_filter(resolve(filter_o), corpus, filter_o.out);
      std::printf("%zu of %zu samples accepted\n", m.accepted_count(), m.records.size());
    } else if (t1->parsed()) {
      cmd_train_stage1(resolve(t1_o), manifest, t1_o.out, opt_path(init));
      std::printf("checkpoint written to %s\n", t1_o.out.c_str());
    } else if (t2->parsed()) {
      cmd_train_stage2(resolve(t2_o), manifest, t2_o.out, init);
      std::printf("checkpoint written to %s\n", t2_o.out.c_str());
    } else if (gen->parsed()) {
      const RunReport r = cmd_generate(resolve(gen_o), input, gen_o.out, opt_path(checkpoint), extend);
      std::cout << r.text();
    } else if (ev->parsed()) {
      std::cout << cmd_eval(resolve(eval_o), gen_dir, ref_dir, opt_path(eval_o.out));
    } else if (st->parsed()) {
      bool ok = true;
      for (const auto& c : selftest_checks()) {
        const CheckResult r = run_check(c);
        std::printf("%s %-26s %7.2fs  %s\n", r.passed ? "ok  " : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
        ok &= r.passed;
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  }
  return 0;
}
