#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "harmony/baselines.hpp"
#include "harmony/edges.hpp"
#include "harmony/error.hpp"
#include "harmony/field.hpp"
#include "harmony/flow.hpp"
#include "harmony/io.hpp"
#include "harmony/phantom.hpp"
#include "harmony/refine.hpp"

namespace harmony::cli {

using nlohmann::json;

namespace {

// Collects log lines and writes log.txt when the command finishes, also on failure.
class RunLog {
public:
  explicit RunLog(fs::path path) : path_(std::move(path)) {}
  RunLog(const RunLog&) = delete;
  RunLog& operator=(const RunLog&) = delete;
  ~RunLog() {
    try {
      write_file_atomic(path_, text_.str());
    } catch (...) {
    }
  }

  template <typename... Args>
  void line(const Args&... args) {
    (text_ << ... << args);
    text_ << '\n';
  }

private:
  fs::path path_;
  std::ostringstream text_;
};

void prepare_run_dir(const fs::path& out, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create run directory " + out.string() + ": " + ec.message());
  write_file_atomic(out / "config.json", to_json(cfg).dump(2) + "\n");
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

Volume3D load_input(const fs::path& path, const RunConfig& cfg, RunLog& log) {
  auto v = load_volume(path);
  v.check_finite();
  if (!cfg.volume.normalize) return v;
  auto n = normalize_percentile(v, cfg.volume.lo, cfg.volume.hi);
  log.line("normalised ", path.string(), ": p_low=", n.record.p_low, " p_high=", n.record.p_high);
  return std::move(n.volume);
}

std::vector<Volume3D> load_references(const std::vector<fs::path>& refs, const RunConfig& cfg, RunLog& log) {
  std::vector<Volume3D> out;
  for (const auto& r : refs) {
    if (fs::is_directory(r)) {
      const auto m = read_corpus_manifest(r);
      for (auto i : m.train) out.push_back(load_input(m.subjects[static_cast<std::size_t>(i)].target, cfg, log));
    } else {
      out.push_back(load_input(r, cfg, log));
    }
  }
  if (out.empty()) throw UsageError("no reference volumes given");
  return out;
}

std::vector<std::pair<double, double>> read_scores(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<double, double>> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    double a = 0.0, b = 0.0;
    char comma = 0;
    std::istringstream ls(line);
    if (!(ls >> a >> comma >> b) || comma != ',') {
      if (n == 1) continue;  // header
      throw DataError(path.string() + ":" + std::to_string(n) + ": expected pred,truth");
    }
    rows.emplace_back(a, b);
  }
  return rows;
}

}  // namespace

json report_json(const MetricsReport& r) {
  json j;
  j["psnr"] = r.psnr_infinite ? json() : json(r.psnr);
  j["psnr_infinite"] = r.psnr_infinite;
  j["ssim"] = r.ssim;
  j["mask_voxels"] = r.mask_voxels;
  if (r.dice) {
    json d = json::object();
    for (const auto& [label, score] : *r.dice) d[std::to_string(label)] = score;
    j["dice"] = d;
  }
  if (r.mae) j["mae"] = *r.mae;
  return j;
}

void cmd_phantom(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  prepare_run_dir(out, cfg);
  RunLog log(out / "log.txt");
  const auto corpus = generate_corpus(cfg.phantom.spec, cfg.phantom.subjects, cfg.phantom.target,
                                      cfg.phantom.sources, cfg.phantom.split);
  write_corpus(corpus, out);
  log.line("subjects=", corpus.subjects.size(), " train=", corpus.train.size(), " val=", corpus.val.size(),
           " test=", corpus.test.size(), " sources=", cfg.phantom.sources.size());
  write_json(out / "metrics.json", {{"subjects", corpus.subjects.size()},
                                    {"train", corpus.train},
                                    {"val", corpus.val},
                                    {"test", corpus.test}});
}

void cmd_edge(const fs::path& volume, const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  prepare_run_dir(out, cfg);
  RunLog log(out / "log.txt");
  const auto v = load_input(volume, cfg, log);
  const auto e = adaptive_edge_detect(v, cfg.edges);
  save_edge_map(e, out / "edges.hvol", v.spacing());
  log.line("edge_fraction=", e.edge_fraction, " threshold=", e.threshold_used, " voxels=", e.popcount());
  write_json(out / "metrics.json",
             {{"edge_fraction", e.edge_fraction}, {"threshold", e.threshold_used}, {"edge_voxels", e.popcount()}});
}

void cmd_train(const fs::path& corpus, const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  prepare_run_dir(out, cfg);
  RunLog log(out / "log.txt");
  const auto manifest = read_corpus_manifest(corpus);
  if (manifest.train.empty()) throw DataError("corpus has an empty training split");

  std::vector<Volume3D> volumes;
  std::vector<EdgeMap> edges;
  for (auto i : manifest.train) {
    volumes.push_back(load_input(manifest.subjects[static_cast<std::size_t>(i)].target, cfg, log));
    edges.push_back(adaptive_edge_detect(volumes.back(), cfg.edges));
    log.line("subject ", i, " edge_fraction=", edges.back().edge_fraction);
  }

  Rng init_rng(derive_seed(cfg.seed, 1));
  VelocityField<float> field(cfg.field, init_params<float>(cfg.field, init_rng));
  log.line("parameters=", field.parameter_count());

  auto flow = cfg.flow;
  if (flow.checkpoint_every > 0) flow.checkpoint_dir = out;
  const auto every = std::max<std::int64_t>(1, flow.steps / 20);
  auto result = train(std::move(field), volumes, edges, flow, cfg.patches, [&](std::int64_t step, double loss) {
    if ((step + 1) % every == 0) log.line("step ", step + 1, " loss ", loss);
  });

  save_checkpoint(result.field, out / "model.ckpt");
  save_loss_trace_csv(result.loss_trace, out / "loss.csv");

  const auto& t = result.loss_trace;
  const auto window = std::min<std::size_t>(100, t.size());
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    head += t[i];
    tail += t[t.size() - window + i];
  }
  head /= static_cast<double>(window);
  tail /= static_cast<double>(window);
  log.line("mean loss first ", window, " steps ", head, ", last ", window, " steps ", tail);
  write_json(out / "metrics.json",
             {{"steps", t.size()}, {"loss_head_mean", head}, {"loss_tail_mean", tail}, {"final_loss", t.back()}});
}

void cmd_harmonize(const fs::path& checkpoint, const fs::path& source, const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  prepare_run_dir(out, cfg);
  RunLog log(out / "log.txt");
  const auto field = load_checkpoint(checkpoint);
  if (!(field.architecture() == cfg.field))
    log.line("note: using the architecture stored in ", checkpoint.string());
  const auto src = load_input(source, cfg, log);

  const auto edges = adaptive_edge_detect(src, cfg.edges);
  log.line("edge_fraction=", edges.edge_fraction, " threshold=", edges.threshold_used);
  save_edge_map(edges, out / "edges.hvol", src.spacing());

  const auto generated = harmonize_from_edges(field, edges, src, cfg.sampler);
  save_volume(generated, out / "flow.hvol");

  json metrics = {{"edge_fraction", edges.edge_fraction}};
  auto refined = refine(generated, src, cfg.refine);
  if (!refined.trace.empty()) {
    std::ostringstream s;
    for (std::size_t i = 0; i < refined.trace.size(); ++i) s << (i ? " " : "") << refined.trace[i];
    log.line("refine trace: ", s.str());
  }
  metrics["refine_trace"] = refined.trace;
  save_volume(refined.volume, out / "harmonized.hvol");
  write_json(out / "metrics.json", metrics);
}

void cmd_baseline(const std::string& method, const fs::path& source, const std::vector<fs::path>& references,
                  const RunConfig& cfg, const fs::path& out) {
  if (method != "histmatch" && method != "ssimh")
    throw UsageError("unknown baseline '" + method + "' (expected histmatch or ssimh)");
  cfg.validate();
  prepare_run_dir(out, cfg);
  RunLog log(out / "log.txt");
  const auto src = load_input(source, cfg, log);
  const auto refs = load_references(references, cfg, log);
  log.line(method, " with ", refs.size(), " reference volumes");

  Volume3D result;
  if (method == "histmatch") {
    const auto hist = build_target_histogram(refs, cfg.baselines.histogram_bins);
    result = histogram_match(src, hist);
  } else {
    result = ssimh(src, mean_volume(refs), cfg.baselines.ssimh_cutoff);
  }
  save_volume(result, out / "baseline.hvol");
  write_json(out / "metrics.json", {{"method", method}, {"references", refs.size()}});
}

void cmd_eval(const fs::path& pred, const fs::path& truth, const EvalExtras& extras, const RunConfig& cfg,
              const fs::path& out) {
  cfg.validate();
  prepare_run_dir(out, cfg);
  RunLog log(out / "log.txt");
  const auto a = load_volume(pred);
  const auto b = load_volume(truth);
  auto mc = cfg.metrics;
  if (extras.mask) {
    const auto m = load_volume(*extras.mask);
    if (!(m.dims() == b.dims())) throw ShapeError("mask dims differ from the volumes");
    Mask mask(static_cast<std::size_t>(m.size()));
    for (std::int64_t i = 0; i < m.size(); ++i) mask[static_cast<std::size_t>(i)] = m[i] != 0.0;
    mc.mask = std::move(mask);
  }
  auto report = evaluate(a, b, mc);
  if (extras.pred_labels.has_value() != extras.truth_labels.has_value())
    throw UsageError("--pred-labels and --truth-labels go together");
  if (extras.pred_labels) {
    report.dice = dice_per_label(load_volume(*extras.pred_labels), load_volume(*extras.truth_labels));
  }
  if (extras.scores) {
    const auto rows = read_scores(*extras.scores);
    std::vector<double> p, t;
    for (const auto& [x, y] : rows) {
      p.push_back(x);
      t.push_back(y);
    }
    report.mae = mae(p, t);
  }
  log.line("psnr=", report.psnr_infinite ? std::string("inf") : std::to_string(report.psnr), " ssim=", report.ssim,
           " mask_voxels=", report.mask_voxels);
  write_json(out / "metrics.json", report_json(report));
}

}  // namespace harmony::cli
