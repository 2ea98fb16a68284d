#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "harmony/metrics.hpp"
#include "json.hpp"
#include "run_config.hpp"

namespace harmony::cli {

namespace fs = std::filesystem;

// Every command writes into a run directory: config.json (the effective
// configuration), its outputs, metrics.json and log.txt.

// <out>/manifest.json and <out>/subject_<sss>/...
void cmd_phantom(const RunConfig& cfg, const fs::path& out);

// <out>/edges.hvol
void cmd_edge(const fs::path& volume, const RunConfig& cfg, const fs::path& out);

// Trains on the target volumes of the corpus training split.
// <out>/model.ckpt and <out>/loss.csv
void cmd_train(const fs::path& corpus, const RunConfig& cfg, const fs::path& out);

// <out>/edges.hvol, <out>/flow.hvol (before refinement) and <out>/harmonized.hvol
void cmd_harmonize(const fs::path& checkpoint, const fs::path& source, const RunConfig& cfg, const fs::path& out);

// method is "histmatch" or "ssimh". Each reference is a volume file or a
// corpus directory, which contributes the targets of its training split.
// <out>/baseline.hvol
void cmd_baseline(const std::string& method, const fs::path& source, const std::vector<fs::path>& references,
                  const RunConfig& cfg, const fs::path& out);

struct EvalExtras {
  std::optional<fs::path> mask;         // nonzero voxels form the metric mask
  std::optional<fs::path> pred_labels;  // label volumes for per-label Dice
  std::optional<fs::path> truth_labels;
  std::optional<fs::path> scores;       // CSV of "pred,truth" rows for MAE
};

// <out>/metrics.json
void cmd_eval(const fs::path& pred, const fs::path& truth, const EvalExtras& extras, const RunConfig& cfg,
              const fs::path& out);

nlohmann::json report_json(const MetricsReport& r);

}  // namespace harmony::cli
