#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <new>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "harmony/error.hpp"
#include "json.hpp"
#include "run_config.hpp"

namespace {

using harmony::cli::fs::path;

const char* kind_name(harmony::ErrorKind k) {
  switch (k) {
    case harmony::ErrorKind::usage: return "usage";
    case harmony::ErrorKind::data: return "data";
    case harmony::ErrorKind::convergence: return "convergence";
    case harmony::ErrorKind::capacity: return "capacity";
    case harmony::ErrorKind::io: return "io";
  }
  return "data";
}

int report(const char* kind, const std::string& message, int code, const nlohmann::json& extra = {}) {
  nlohmann::json e = {{"kind", kind}, {"message", message}, {"exit_code", code}};
  if (extra.is_object()) e.update(extra);
  std::cerr << nlohmann::json{{"error", e}}.dump() << '\n';
  return code;
}

struct Common {
  std::optional<path> config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
  path out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "top-level seed (overrides the file)");
  cmd->add_option("--set", c.set, "override one value, e.g. --set flow.steps=500")->allow_extra_args(false);
  cmd->add_option("--out", c.out, "run directory")->required();
}

// defaults < file < flags
harmony::cli::RunConfig resolve(const Common& c) {
  harmony::cli::RunConfig cfg = c.config ? harmony::cli::load_run_config(*c.config) : harmony::cli::RunConfig{};
  for (const auto& s : c.set) harmony::cli::apply_override(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  harmony::cli::apply_seed(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edge-conditioned rectified-flow harmonization of 3D volumes", "harmony"};
  app.require_subcommand(1);

  Common common;

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic multi-domain corpus");
  add_common(phantom, common);

  path edge_in;
  auto* edge = app.add_subcommand("edge", "adaptive 3D Canny edge map of a volume");
  edge->add_option("volume", edge_in, "input volume (.hvol or .nii)")->required()->check(CLI::ExistingFile);
  add_common(edge, common);

  path corpus_dir;
  auto* train = app.add_subcommand("train", "train the edge-to-image velocity field on a corpus");
  train->add_option("corpus", corpus_dir, "corpus directory")->required()->check(CLI::ExistingDirectory);
  add_common(train, common);

  path ckpt, source;
  auto* harmonize = app.add_subcommand("harmonize", "harmonize a volume with a trained model");
  harmonize->add_option("checkpoint", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  harmonize->add_option("source", source, "source volume")->required()->check(CLI::ExistingFile);
  add_common(harmonize, common);

  std::string method;
  path baseline_src;
  std::vector<path> refs;
  auto* baseline = app.add_subcommand("baseline", "histogram matching or spectrum swapping");
  baseline->add_option("method", method, "histmatch or ssimh")->required()->check(CLI::IsMember({"histmatch", "ssimh"}));
  baseline->add_option("source", baseline_src, "source volume")->required()->check(CLI::ExistingFile);
  baseline->add_option("--reference", refs, "target-domain volume or corpus directory")->required()->check(CLI::ExistingPath);
  add_common(baseline, common);

  path pred, truth;
  harmony::cli::EvalExtras extras;
  auto* eval = app.add_subcommand("eval", "PSNR, SSIM and optional Dice/MAE against a reference");
  eval->add_option("pred", pred, "predicted volume")->required()->check(CLI::ExistingFile);
  eval->add_option("truth", truth, "reference volume")->required()->check(CLI::ExistingFile);
  eval->add_option("--mask", extras.mask, "mask volume (nonzero voxels)")->check(CLI::ExistingFile);
  eval->add_option("--pred-labels", extras.pred_labels, "label volume of the prediction")->check(CLI::ExistingFile);
  eval->add_option("--truth-labels", extras.truth_labels, "label volume of the reference")->check(CLI::ExistingFile);
  eval->add_option("--scores", extras.scores, "CSV of pred,truth rows for MAE")->check(CLI::ExistingFile);
  add_common(eval, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), 2);
  }

  try {
    const auto cfg = resolve(common);
    if (phantom->parsed()) harmony::cli::cmd_phantom(cfg, common.out);
    if (edge->parsed()) harmony::cli::cmd_edge(edge_in, cfg, common.out);
    if (train->parsed()) harmony::cli::cmd_train(corpus_dir, cfg, common.out);
    if (harmonize->parsed()) harmony::cli::cmd_harmonize(ckpt, source, cfg, common.out);
    if (baseline->parsed()) harmony::cli::cmd_baseline(method, baseline_src, refs, cfg, common.out);
    if (eval->parsed()) harmony::cli::cmd_eval(pred, truth, extras, cfg, common.out);
  } catch (const harmony::ConvergenceError& e) {
    return report("convergence", e.what(), harmony::exit_code(e.kind()), {{"last_value", e.last_value()}});
  } catch (const harmony::Error& e) {
    return report(kind_name(e.kind()), e.what(), harmony::exit_code(e.kind()));
  } catch (const std::filesystem::filesystem_error& e) {
    return report("io", e.what(), 3);
  } catch (const std::bad_alloc&) {
    return report("capacity", "out of memory", 3);
  } catch (const std::exception& e) {
    return report("internal", e.what(), 3);
  }
  return 0;
}
