#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "harmony/baselines.hpp"
#include "harmony/edges.hpp"
#include "harmony/field.hpp"
#include "harmony/flow.hpp"
#include "harmony/metrics.hpp"
#include "harmony/patches.hpp"
#include "harmony/phantom.hpp"
#include "harmony/refine.hpp"
#include "json.hpp"

namespace harmony::cli {

struct VolumeSection {
  // Percentile normalisation of source/training volumes on load. Phantom
  // corpora are already in [0, 1] and are used as they are.
  bool normalize = false;
  double lo = 1.0;
  double hi = 99.0;
};

struct BaselineSection {
  std::int64_t histogram_bins = 1024;
  double ssimh_cutoff = 0.05;
};

struct PhantomSection {
  PhantomSpec spec;
  std::int64_t subjects = 10;
  SplitFractions split;
  ContrastFunction target = target_contrast();
  std::vector<ContrastFunction> sources = source_contrasts();
};

// Everything a command needs. Module-level seeds are not part of the file:
// they are derived from the single top-level seed by apply_seed().
struct RunConfig {
  std::uint64_t seed = 0;
  VolumeSection volume;
  CannyConfig edges;
  PatchSamplerConfig patches;
  Architecture field;
  FlowTrainConfig flow;
  SamplerConfig sampler;  // "flow.sampling" in the file
  RefineConfig refine;
  BaselineSection baselines;
  MetricsConfig metrics;
  PhantomSection phantom;

  void validate() const;
};

// Stream k of the top-level seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Copies derived seeds into every module config.
void apply_seed(RunConfig& cfg);

// Overlays a JSON document onto cfg. Unknown keys and mistyped values raise UsageError.
void merge_json(RunConfig& cfg, const nlohmann::json& doc);

// Applies "section.key=value" (value parsed as JSON, or taken as a string).
void apply_override(RunConfig& cfg, std::string_view assignment);

// Effective configuration with every default filled in.
nlohmann::json to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace harmony::cli
