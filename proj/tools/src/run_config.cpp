#include "run_config.hpp"

#include <set>
#include <utility>

#include "harmony/error.hpp"
#include "harmony/io.hpp"

namespace harmony::cli {

using nlohmann::json;

namespace {

[[noreturn]] void bad_type(const std::string& where, const char* expected) {
  throw UsageError("config: " + where + " must be " + expected);
}

void read(const json& j, std::pair<double, double>& out, const std::string& where);
void read(const json& j, ContrastFunction& out, const std::string& where);

void read(const json& j, bool& out, const std::string& where) {
  if (!j.is_boolean()) bad_type(where, "a boolean");
  out = j.get<bool>();
}

void read(const json& j, std::int64_t& out, const std::string& where) {
  if (!j.is_number_integer()) bad_type(where, "an integer");
  out = j.get<std::int64_t>();
}

void read(const json& j, int& out, const std::string& where) {
  std::int64_t v = 0;
  read(j, v, where);
  out = static_cast<int>(v);
}

void read(const json& j, std::uint64_t& out, const std::string& where) {
  if (!j.is_number_unsigned()) bad_type(where, "a non-negative integer");
  out = j.get<std::uint64_t>();
}

void read(const json& j, double& out, const std::string& where) {
  if (!j.is_number()) bad_type(where, "a number");
  out = j.get<double>();
}

void read(const json& j, std::optional<double>& out, const std::string& where) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  double v = 0.0;
  read(j, v, where);
  out = v;
}

template <typename T>
void read(const json& j, std::vector<T>& out, const std::string& where) {
  if (!j.is_array()) bad_type(where, "an array");
  std::vector<T> v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) read(j[i], v[i], where + "[" + std::to_string(i) + "]");
  out = std::move(v);
}

void read(const json& j, Index3& out, const std::string& where) {
  if (!j.is_array() || j.size() != 3) bad_type(where, "an array of three integers");
  for (std::size_t i = 0; i < 3; ++i) read(j[i], out[i], where);
}

void read(const json& j, std::optional<Index3>& out, const std::string& where) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  Index3 v{};
  read(j, v, where);
  out = v;
}

void read(const json& j, Dims& out, const std::string& where) {
  Index3 v{};
  read(j, v, where);
  out = Dims{v[0], v[1], v[2]};
}

void read(const json& j, Spacing& out, const std::string& where) {
  if (!j.is_array() || j.size() != 3) bad_type(where, "an array of three numbers");
  double s[3];
  for (std::size_t i = 0; i < 3; ++i) read(j[i], s[i], where);
  out = Spacing{static_cast<float>(s[0]), static_cast<float>(s[1]), static_cast<float>(s[2])};
}

template <typename E>
void read_enum(const json& j, E& out, const std::string& where,
               std::initializer_list<std::pair<const char*, E>> names) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    for (const auto& [name, value] : names) {
      if (s == name) {
        out = value;
        return;
      }
    }
  }
  std::string expected = "one of";
  for (const auto& n : names) expected += std::string(" \"") + n.first + "\"";
  bad_type(where, expected.c_str());
}

void read(const json& j, nn::Padding& out, const std::string& where) {
  read_enum(j, out, where, {{"zero", nn::Padding::zero}, {"periodic", nn::Padding::periodic}});
}

void read(const json& j, Solver& out, const std::string& where) {
  read_enum(j, out, where, {{"midpoint", Solver::midpoint}, {"euler", Solver::euler}});
}

void read(const json& j, RefineMetric& out, const std::string& where) {
  read_enum(j, out, where, {{"ncc", RefineMetric::ncc}, {"mi", RefineMetric::mi}, {"none", RefineMetric::none}});
}

void read(const json& j, GradientScale& out, const std::string& where) {
  read_enum(j, out, where, {{"per_voxel", GradientScale::per_voxel}, {"raw", GradientScale::raw}});
}

void read(const json& j, PhantomLayout& out, const std::string& where) {
  read_enum(j, out, where, {{"brain", PhantomLayout::brain}, {"shapes", PhantomLayout::shapes}});
}

// Walks one JSON object, remembering which keys were consumed.
class Section {
public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad_type(where_.empty() ? "the document" : where_, "an object");
  }

  template <typename T>
  Section& get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it != j_.end()) {
      seen_.insert(key);
      read(*it, out, name(key));
    }
    return *this;
  }

  template <typename F>
  Section& nested(const char* key, F&& fn) {
    auto it = j_.find(key);
    if (it != j_.end()) {
      seen_.insert(key);
      Section child(*it, name(key));
      fn(child);
      child.finish();
    }
    return *this;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw UsageError("config: unknown key " + name(item.key().c_str()));
    }
  }

  std::string name(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read(const json& j, std::pair<double, double>& out, const std::string& where) {
  if (!j.is_array() || j.size() != 2) bad_type(where, "an [x, y] pair");
  read(j[0], out.first, where);
  read(j[1], out.second, where);
}

void read(const json& j, ContrastFunction& out, const std::string& where) {
  Section s(j, where);
  s.get("points", out.points).get("bias_amplitude", out.bias_amplitude).get("noise_sigma", out.noise_sigma);
  s.finish();
}

json contrast_json(const ContrastFunction& c) {
  json pts = json::array();
  for (const auto& [x, y] : c.points) pts.push_back({x, y});
  return {{"points", pts}, {"bias_amplitude", c.bias_amplitude}, {"noise_sigma", c.noise_sigma}};
}

const char* name_of(nn::Padding p) { return p == nn::Padding::zero ? "zero" : "periodic"; }
const char* name_of(Solver s) { return s == Solver::midpoint ? "midpoint" : "euler"; }
const char* name_of(GradientScale g) { return g == GradientScale::per_voxel ? "per_voxel" : "raw"; }
const char* name_of(PhantomLayout l) { return l == PhantomLayout::brain ? "brain" : "shapes"; }
const char* name_of(RefineMetric m) {
  switch (m) {
    case RefineMetric::ncc: return "ncc";
    case RefineMetric::mi: return "mi";
    case RefineMetric::none: return "none";
  }
  return "none";
}

json index_json(const Index3& v) { return json::array({v[0], v[1], v[2]}); }

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over (seed, stream)
  std::uint64_t z = seed + (stream + 1) * 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void apply_seed(RunConfig& cfg) {
  cfg.phantom.spec.rng_seed = derive_seed(cfg.seed, 0);
  cfg.flow.rng_seed = derive_seed(cfg.seed, 2);
  cfg.patches.rng_seed = derive_seed(cfg.seed, 3);
  cfg.sampler.rng_seed = derive_seed(cfg.seed, 4);
}

void RunConfig::validate() const {
  if (!(volume.lo >= 0.0 && volume.lo < volume.hi && volume.hi <= 100.0))
    throw UsageError("config: volume.lo/hi must satisfy 0 <= lo < hi <= 100");
  if (baselines.histogram_bins < 2) throw UsageError("config: baselines.histogram_bins must be >= 2");
  if (!(baselines.ssimh_cutoff >= 0.0)) throw UsageError("config: baselines.ssimh_cutoff must be >= 0");
  if (phantom.subjects < 1) throw UsageError("config: phantom.subjects must be >= 1");
  if (!(phantom.split.train >= 0.0 && phantom.split.val >= 0.0 && phantom.split.train + phantom.split.val <= 1.0))
    throw UsageError("config: phantom split fractions must be non-negative and sum to at most 1");
  edges.validate();
  patches.validate();
  field.validate();
  flow.validate();
  sampler.validate();
  refine.validate();
  metrics.validate();
  phantom.spec.validate();
  phantom.target.validate();
  for (const auto& c : phantom.sources) c.validate();
}

void merge_json(RunConfig& cfg, const json& doc) {
  Section top(doc, "");
  top.get("seed", cfg.seed);
  top.nested("volume", [&](Section& s) {
    s.get("normalize", cfg.volume.normalize).get("lo", cfg.volume.lo).get("hi", cfg.volume.hi);
  });
  top.nested("edges", [&](Section& s) {
    s.get("smoothing_sigma", cfg.edges.smoothing_sigma)
        .get("low_high_ratio", cfg.edges.low_high_ratio)
        .get("target_fraction", cfg.edges.target_fraction)
        .get("decrement_step", cfg.edges.decrement_step)
        .get("max_iterations", cfg.edges.max_iterations);
  });
  top.nested("patches", [&](Section& s) {
    s.get("patch_size", cfg.patches.patch_size)
        .get("multistride_ratio", cfg.patches.multistride_ratio)
        .get("max_multiple", cfg.patches.max_multiple)
        .get("random_flips", cfg.patches.random_flips);
  });
  top.nested("field", [&](Section& s) {
    s.get("base_width", cfg.field.base_width)
        .get("multipliers", cfg.field.multipliers)
        .get("kernel", cfg.field.kernel)
        .get("time_dim", cfg.field.time_dim)
        .get("padding", cfg.field.padding);
  });
  top.nested("flow", [&](Section& s) {
    s.get("learning_rate", cfg.flow.learning_rate)
        .get("batch_size", cfg.flow.batch_size)
        .get("steps", cfg.flow.steps)
        .get("beta1", cfg.flow.beta1)
        .get("beta2", cfg.flow.beta2)
        .get("epsilon", cfg.flow.epsilon)
        .get("checkpoint_every", cfg.flow.checkpoint_every);
    s.nested("sampling", [&](Section& t) {
      t.get("n_steps", cfg.sampler.n_steps)
          .get("solver", cfg.sampler.solver)
          .get("abs_tol", cfg.sampler.abs_tol)
          .get("rel_tol", cfg.sampler.rel_tol)
          .get("memory_budget_bytes", cfg.sampler.memory_budget_bytes)
          .get("tiled", cfg.sampler.tiled)
          .get("tile_size", cfg.sampler.tile_size)
          .get("tile_overlap", cfg.sampler.tile_overlap);
    });
  });
  top.nested("refine", [&](Section& s) {
    s.get("metric", cfg.refine.metric)
        .get("step_size", cfg.refine.step_size)
        .get("mi_step_size", cfg.refine.mi_step_size)
        .get("iterations", cfg.refine.iterations)
        .get("mi_bins", cfg.refine.mi_bins)
        .get("mi_sigma", cfg.refine.mi_sigma)
        .get("gradient_scale", cfg.refine.gradient_scale);
  });
  top.nested("baselines", [&](Section& s) {
    s.get("histogram_bins", cfg.baselines.histogram_bins).get("ssimh_cutoff", cfg.baselines.ssimh_cutoff);
  });
  top.nested("metrics", [&](Section& s) {
    s.get("use_mask", cfg.metrics.use_mask)
        .get("mask_fraction", cfg.metrics.mask_fraction)
        .get("peak", cfg.metrics.peak)
        .get("ssim_window", cfg.metrics.ssim.window)
        .get("ssim_sigma", cfg.metrics.ssim.sigma)
        .get("ssim_k1", cfg.metrics.ssim.k1)
        .get("ssim_k2", cfg.metrics.ssim.k2)
        .get("ssim_data_range", cfg.metrics.ssim.data_range);
  });
  top.nested("phantom", [&](Section& s) {
    auto& p = cfg.phantom.spec;
    s.get("subjects", cfg.phantom.subjects)
        .get("train_fraction", cfg.phantom.split.train)
        .get("val_fraction", cfg.phantom.split.val)
        .get("dims", p.dims)
        .get("spacing", p.spacing)
        .get("layout", p.layout)
        .get("n_shapes", p.n_shapes)
        .get("tissue_levels", p.tissue_levels)
        .get("head_scale", p.head_scale)
        .get("nucleus_radius", p.nucleus_radius)
        .get("smoothing_sigma", p.smoothing_sigma)
        .get("fold_amplitude", p.fold_amplitude)
        .get("grey_variation", p.grey_variation)
        .get("lesion", p.lesion)
        .get("lesion_level", p.lesion_level)
        .get("lesion_radius", p.lesion_radius)
        .get("target", cfg.phantom.target)
        .get("sources", cfg.phantom.sources);
  });
  top.finish();
}

json to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["volume"] = {{"normalize", cfg.volume.normalize}, {"lo", cfg.volume.lo}, {"hi", cfg.volume.hi}};
  const auto& e = cfg.edges;
  j["edges"] = {{"smoothing_sigma", e.smoothing_sigma},
                {"low_high_ratio", e.low_high_ratio},
                {"target_fraction", e.target_fraction},
                {"decrement_step", e.decrement_step ? json(*e.decrement_step) : json()},
                {"max_iterations", e.max_iterations}};
  const auto& p = cfg.patches;
  j["patches"] = {{"patch_size", p.patch_size},
                  {"multistride_ratio", p.multistride_ratio},
                  {"max_multiple", p.max_multiple ? index_json(*p.max_multiple) : json()},
                  {"random_flips", p.random_flips}};
  const auto& f = cfg.field;
  j["field"] = {{"base_width", f.base_width},
                {"multipliers", f.multipliers},
                {"kernel", f.kernel},
                {"time_dim", f.time_dim},
                {"padding", name_of(f.padding)}};
  const auto& s = cfg.sampler;
  j["flow"] = {{"learning_rate", cfg.flow.learning_rate},
               {"batch_size", cfg.flow.batch_size},
               {"steps", cfg.flow.steps},
               {"beta1", cfg.flow.beta1},
               {"beta2", cfg.flow.beta2},
               {"epsilon", cfg.flow.epsilon},
               {"checkpoint_every", cfg.flow.checkpoint_every},
               {"sampling",
                {{"n_steps", s.n_steps},
                 {"solver", name_of(s.solver)},
                 {"abs_tol", s.abs_tol},
                 {"rel_tol", s.rel_tol},
                 {"memory_budget_bytes", s.memory_budget_bytes},
                 {"tiled", s.tiled},
                 {"tile_size", s.tile_size},
                 {"tile_overlap", s.tile_overlap}}}};
  const auto& r = cfg.refine;
  j["refine"] = {{"metric", name_of(r.metric)},
                 {"step_size", r.step_size},
                 {"mi_step_size", r.mi_step_size},
                 {"iterations", r.iterations},
                 {"mi_bins", r.mi_bins},
                 {"mi_sigma", r.mi_sigma},
                 {"gradient_scale", name_of(r.gradient_scale)}};
  j["baselines"] = {{"histogram_bins", cfg.baselines.histogram_bins}, {"ssimh_cutoff", cfg.baselines.ssimh_cutoff}};
  const auto& m = cfg.metrics;
  j["metrics"] = {{"use_mask", m.use_mask},
                  {"mask_fraction", m.mask_fraction},
                  {"peak", m.peak},
                  {"ssim_window", m.ssim.window},
                  {"ssim_sigma", m.ssim.sigma},
                  {"ssim_k1", m.ssim.k1},
                  {"ssim_k2", m.ssim.k2},
                  {"ssim_data_range", m.ssim.data_range}};
  const auto& ph = cfg.phantom.spec;
  json sources = json::array();
  for (const auto& c : cfg.phantom.sources) sources.push_back(contrast_json(c));
  j["phantom"] = {{"subjects", cfg.phantom.subjects},
                  {"train_fraction", cfg.phantom.split.train},
                  {"val_fraction", cfg.phantom.split.val},
                  {"dims", json::array({ph.dims.nx, ph.dims.ny, ph.dims.nz})},
                  {"spacing", json::array({ph.spacing.sx, ph.spacing.sy, ph.spacing.sz})},
                  {"layout", name_of(ph.layout)},
                  {"n_shapes", ph.n_shapes},
                  {"tissue_levels", ph.tissue_levels},
                  {"head_scale", ph.head_scale},
                  {"nucleus_radius", ph.nucleus_radius},
                  {"smoothing_sigma", ph.smoothing_sigma},
                  {"fold_amplitude", ph.fold_amplitude},
                  {"grey_variation", ph.grey_variation},
                  {"lesion", ph.lesion},
                  {"lesion_level", ph.lesion_level},
                  {"lesion_radius", ph.lesion_radius},
                  {"target", contrast_json(cfg.phantom.target)},
                  {"sources", sources}};
  return j;
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw UsageError("--set expects section.key=value, got '" + std::string(assignment) + "'");
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json patch = json::object();
  json* cursor = &patch;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("--set: malformed key '" + key + "'");
    if (dot == std::string::npos) {
      (*cursor)[part] = value;
      break;
    }
    cursor = &(*cursor)[part];
    start = dot + 1;
  }
  merge_json(cfg, patch);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  json doc = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (doc.is_discarded()) throw UsageError("config: " + path.string() + " is not valid JSON");
  RunConfig cfg;
  merge_json(cfg, doc);
  return cfg;
}

}  // namespace harmony::cli
