#include "harmony/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "json.hpp"

#include "harmony/edges.hpp"
#include "harmony/error.hpp"
#include "harmony/io.hpp"

namespace harmony {

void PhantomSpec::validate() const {
  if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw UsageError("phantom dims must be positive");
  if (n_shapes < 1) throw UsageError("phantom n_shapes must be >= 1");
  if (!(smoothing_sigma >= 0.0)) throw UsageError("phantom smoothing_sigma must be >= 0");
  if (!(grey_variation >= 0.0 && grey_variation < 0.5)) throw UsageError("phantom grey_variation must lie in [0, 0.5)");
  if (!(fold_amplitude >= 0.0 && fold_amplitude < 0.5)) throw UsageError("phantom fold_amplitude must lie in [0, 0.5)");
  if (!(lesion_radius > 0.0 && lesion_radius < 0.5)) throw UsageError("phantom lesion_radius must lie in (0, 0.5)");
  if (!(lesion_level > 0.0 && lesion_level <= 1.0)) throw UsageError("phantom lesion_level must lie in (0, 1]");
  if (lesion && layout != PhantomLayout::brain) throw UsageError("phantom lesions need the brain layout");
  if (!(head_scale > 0.2 && head_scale <= 1.1)) throw UsageError("phantom head_scale must lie in (0.2, 1.1]");
  if (!(nucleus_radius > 0.0 && nucleus_radius < 0.2)) throw UsageError("phantom nucleus_radius must lie in (0, 0.2)");
  const auto expected = static_cast<std::size_t>(layout == PhantomLayout::brain ? 4 + n_shapes : n_shapes);
  if (!tissue_levels.empty() && tissue_levels.size() != expected) {
    throw UsageError("phantom tissue_levels must have " + std::to_string(expected) + " entries");
  }
  for (double l : tissue_levels) {
    if (!(l > 0.0 && l < 1.0)) throw UsageError("phantom tissue levels must lie in (0, 1)");
  }
}

std::vector<double> PhantomSpec::levels() const {
  if (!tissue_levels.empty()) return tissue_levels;
  if (layout == PhantomLayout::brain) {
    std::vector<double> out{0.9, 0.12, 0.55, 0.8};
    for (std::int64_t i = 0; i < n_shapes; ++i) {
      out.push_back(n_shapes == 1 ? 0.68 : 0.62 + 0.12 * static_cast<double>(i) / static_cast<double>(n_shapes - 1));
    }
    return out;
  }
  std::vector<double> out(static_cast<std::size_t>(n_shapes));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(i + 1) / static_cast<double>(n_shapes + 1);
  return out;
}

void ContrastFunction::validate() const {
  if (points.size() < 2) throw UsageError("contrast map needs at least two control points");
  if (points.front().first != 0.0 || points.back().first != 1.0) {
    throw UsageError("contrast control points must span [0, 1]");
  }
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (!(points[i].first > points[i - 1].first) || !(points[i].second > points[i - 1].second)) {
      throw UsageError("contrast map must be strictly increasing");
    }
  }
  if (!(bias_amplitude >= 0.0)) throw UsageError("bias_amplitude must be >= 0");
  if (!(noise_sigma >= 0.0)) throw UsageError("noise_sigma must be >= 0");
}

double ContrastFunction::map(double x) const {
  if (x <= points.front().first) return points.front().second;
  if (x >= points.back().first) return points.back().second;
  const auto it = std::upper_bound(points.begin(), points.end(), x,
                                   [](double v, const std::pair<double, double>& p) { return v < p.first; });
  const auto& hi = *it;
  const auto& lo = *(it - 1);
  return lo.second + (x - lo.first) / (hi.first - lo.first) * (hi.second - lo.second);
}

ContrastFunction identity_contrast() { return {}; }

ContrastFunction target_contrast() { return {{{0.0, 0.0}, {1.0, 1.0}}, 0.05, 0.005}; }

std::vector<ContrastFunction> source_contrasts() {
  return {
      {{{0.0, 0.0}, {0.12, 0.2}, {0.35, 0.42}, {0.55, 0.62}, {0.8, 0.78}, {1.0, 0.9}}, 0.1, 0.01},
      {{{0.0, 0.0}, {0.12, 0.3}, {0.35, 0.45}, {0.55, 0.58}, {0.8, 0.68}, {1.0, 0.85}}, 0.2, 0.01},
      {{{0.0, 0.0}, {0.12, 0.04}, {0.35, 0.6}, {0.55, 0.7}, {0.8, 0.95}, {1.0, 1.0}}, 0.2, 0.01},
  };
}

namespace {

using Vec3 = std::array<double, 3>;

struct Shape {
  Vec3 centre{};
  Vec3 radii{};
  double fold = 0.0;  // relative radial modulation
  int f_theta = 0;
  int f_phi = 0;
  double phase_theta = 0.0;
  double phase_phi = 0.0;
  std::int64_t label = 0;

  bool contains(const Vec3& p) const {
    Vec3 q;
    double rho2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      q[a] = (p[a] - centre[a]) / radii[a];
      rho2 += q[a] * q[a];
    }
    if (fold == 0.0 || rho2 == 0.0) return rho2 < 1.0;
    const double rho = std::sqrt(rho2);
    const double theta = std::acos(std::clamp(q[2] / rho, -1.0, 1.0));
    const double phi = std::atan2(q[1], q[0]);
    const double bound = 1.0 + fold * std::sin(f_theta * theta + phase_theta) * std::sin(f_phi * phi + phase_phi);
    return rho < bound;
  }
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Vec3 scaled(const Vec3& v, double s) { return {v[0] * s, v[1] * s, v[2] * s}; }

Shape folded(const Vec3& centre, const Vec3& radii, double fold, int ft, int fp, std::int64_t label, Rng& rng) {
  Shape s{centre, radii, fold, ft, fp, 0.0, 0.0, label};
  s.phase_theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  s.phase_phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  return s;
}

struct Template {
  Vec3 centre{};
  Vec3 head{};
  std::vector<Shape> shapes;
};

Template brain_template(const PhantomSpec& spec, Rng& rng) {
  Template t;
  for (double& x : t.centre) x = 0.5 + uniform(rng, -0.02, 0.02);
  t.head = {0.40, 0.44, 0.38};
  for (double& r : t.head) r *= spec.head_scale * (1.0 + uniform(rng, -0.02, 0.02));
  const Vec3& c = t.centre;
  auto& shapes = t.shapes;
  shapes.push_back({c, t.head, 0.0, 0, 0, 0.0, 0.0, tissue::scalp});
  shapes.push_back(folded(c, scaled(t.head, 0.80), 0.4 * spec.fold_amplitude, 4, 5, tissue::grey, rng));
  shapes.push_back(folded(c, scaled(t.head, 0.66), spec.fold_amplitude, 5, 6, tissue::white, rng));
  for (double side : {-1.0, 1.0}) {
    const Vec3 vc{c[0] + side * 0.15 * t.head[0], c[1] + uniform(rng, -0.01, 0.01), c[2] + 0.05 * t.head[2]};
    const Vec3 vr{0.09 * t.head[0], 0.27 * t.head[1], 0.16 * t.head[2]};
    shapes.push_back({vc, vr, 0.0, 0, 0, 0.0, 0.0, tissue::csf});
  }
  return t;
}

std::vector<Shape> random_shapes(const PhantomSpec& spec, Rng& rng) {
  std::vector<Shape> shapes;
  shapes.push_back({{0.5, 0.5, 0.5}, {0.35, 0.35, 0.35}, 0.0, 0, 0, 0.0, 0.0, 1});
  for (std::int64_t i = 1; i < spec.n_shapes; ++i) {
    Vec3 c, r;
    for (double& x : c) x = 0.5 + uniform(rng, -0.18, 0.18);
    for (double& x : r) x = uniform(rng, 0.05, 0.15);
    shapes.push_back({c, r, 0.0, 0, 0, 0.0, 0.0, i + 1});
  }
  return shapes;
}

Vec3 voxel_position(const Dims& d, std::int64_t x, std::int64_t y, std::int64_t z) {
  return {(static_cast<double>(x) + 0.5) / static_cast<double>(d.nx),
          (static_cast<double>(y) + 0.5) / static_cast<double>(d.ny),
          (static_cast<double>(z) + 0.5) / static_cast<double>(d.nz)};
}

void paint(Volume3D& labels, const Shape& s) {
  const Dims d = labels.dims();
  for (std::int64_t z = 0; z < d.nz; ++z) {
    for (std::int64_t y = 0; y < d.ny; ++y) {
      for (std::int64_t x = 0; x < d.nx; ++x) {
        if (s.contains(voxel_position(d, x, y, z))) labels(x, y, z) = static_cast<double>(s.label);
      }
    }
  }
}

// True when every voxel inside `s` carries a label accepted by `allowed`.
template <typename Pred>
bool fits(const Volume3D& labels, const Shape& s, Pred allowed) {
  const Dims d = labels.dims();
  std::array<std::int64_t, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    const double n = static_cast<double>(d[a]);
    lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor((s.centre[a] - s.radii[a]) * n - 1.0)));
    hi[a] = std::min<std::int64_t>(d[a] - 1, static_cast<std::int64_t>(std::ceil((s.centre[a] + s.radii[a]) * n + 1.0)));
  }
  for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y) {
      for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
        if (s.contains(voxel_position(d, x, y, z)) && !allowed(std::llround(labels(x, y, z)))) return false;
      }
    }
  }
  return true;
}

// Rejection-samples a ball of relative radius `radius` near the centre of the
// white matter; nullopt when no position fits.
template <typename Pred>
std::optional<Shape> place_ball(const Volume3D& labels, const Template& t, double radius, std::int64_t label,
                                Pred allowed, Rng& rng) {
  for (int attempt = 0; attempt < 400; ++attempt) {
    Vec3 c;
    for (int a = 0; a < 3; ++a) c[a] = t.centre[a] + uniform(rng, -0.5, 0.5) * t.head[a];
    Shape s{c, {}, 0.0, 0, 0, 0.0, 0.0, label};
    for (double& r : s.radii) r = radius * (1.0 + uniform(rng, -0.1, 0.1));
    if (fits(labels, s, allowed)) return s;
  }
  return std::nullopt;
}

}  // namespace

Structure generate_structure(const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  Volume3D labels(spec.dims, spec.spacing);
  std::optional<Mask> lesion;
  Vec3 wave{};  // grey-level modulation direction scaled by spatial frequency
  double wave_phase = 0.0;
  if (spec.layout == PhantomLayout::shapes) {
    for (const auto& s : random_shapes(spec, rng)) paint(labels, s);
  } else {
    const Template t = brain_template(spec, rng);
    for (const auto& s : t.shapes) paint(labels, s);
    auto in_white = [](std::int64_t l) { return l == tissue::white || l >= tissue::first_nucleus; };
    for (std::int64_t i = 0; i < spec.n_shapes; ++i) {
      if (auto s = place_ball(labels, t, spec.nucleus_radius, tissue::first_nucleus + i, in_white, rng)) paint(labels, *s);
    }
    if (spec.lesion) {
      const auto s = place_ball(labels, t, spec.lesion_radius, tissue::lesion, in_white, rng);
      if (!s) throw DataError("could not place a lesion inside white matter");
      paint(labels, *s);
      lesion = Mask(static_cast<std::size_t>(labels.size()));
      const auto lv = labels.values();
      for (std::size_t i = 0; i < lv.size(); ++i) (*lesion)[i] = std::llround(lv[i]) == tissue::lesion;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    double norm = 0.0;
    for (double& w : wave) {
      w = normal(rng);
      norm += w * w;
    }
    const double freq = 2.0 * std::numbers::pi * uniform(rng, 0.8, 1.4);
    for (double& w : wave) w *= freq / std::sqrt(norm);
    wave_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  }
  const auto levels = spec.levels();
  Volume3D piecewise(spec.dims, spec.spacing);
  const Dims d = spec.dims;
  for (std::int64_t z = 0; z < d.nz; ++z) {
    for (std::int64_t y = 0; y < d.ny; ++y) {
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto l = std::llround(labels(x, y, z));
        double& out = piecewise(x, y, z);
        if (l == 0) continue;
        if (spec.layout == PhantomLayout::shapes) {
          out = levels[static_cast<std::size_t>(l - 1)];
        } else if (l == tissue::lesion) {
          out = spec.lesion_level;
        } else {
          out = levels[static_cast<std::size_t>(l < tissue::lesion ? l - 1 : l - 2)];
          if (l == tissue::grey) {
            const Vec3 p = voxel_position(d, x, y, z);
            const double phase = wave[0] * p[0] + wave[1] * p[1] + wave[2] * p[2] + wave_phase;
            out += spec.grey_variation * std::cos(phase);
          }
        }
      }
    }
  }
  Volume3D clean = spec.smoothing_sigma > 0.0 ? gaussian_smooth(piecewise, spec.smoothing_sigma) : piecewise;
  return {std::move(labels), std::move(piecewise), std::move(clean), std::move(lesion)};
}

Volume3D render_domain(const Structure& structure, const ContrastFunction& c, Rng& rng) {
  c.validate();
  const Volume3D& clean = structure.clean;
  const Dims d = clean.dims();
  std::array<double, 9> coef{};
  for (double& a : coef) a = c.bias_amplitude * uniform(rng, -1.0, 1.0);
  Volume3D out(d, clean.spacing());
  std::normal_distribution<double> normal(0.0, c.noise_sigma > 0.0 ? c.noise_sigma : 1.0);
  for (std::int64_t z = 0; z < d.nz; ++z) {
    for (std::int64_t y = 0; y < d.ny; ++y) {
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const Vec3 p = voxel_position(d, x, y, z);
        const double u = 2.0 * p[0] - 1.0, v = 2.0 * p[1] - 1.0, w = 2.0 * p[2] - 1.0;
        const double poly = coef[0] * u + coef[1] * v + coef[2] * w + coef[3] * u * u + coef[4] * v * v +
                            coef[5] * w * w + coef[6] * u * v + coef[7] * u * w + coef[8] * v * w;
        double val = c.map(clean(x, y, z)) * std::exp(poly);
        if (c.noise_sigma > 0.0) val += normal(rng);
        out(x, y, z) = val;
      }
    }
  }
  const double lo = std::min(0.0, out.min());
  const double hi = std::max(1.0, out.max());
  if (lo != 0.0 || hi != 1.0) {
    for (double& v : out.values()) v = (v - lo) / (hi - lo);
  }
  return out;
}

Corpus generate_corpus(const PhantomSpec& spec, std::int64_t n_subjects, const ContrastFunction& c_target,
                       const std::vector<ContrastFunction>& c_sources, const SplitFractions& split) {
  spec.validate();
  c_target.validate();
  for (const auto& c : c_sources) c.validate();
  if (n_subjects < 1) throw UsageError("corpus needs at least one subject");
  if (!(split.train >= 0.0 && split.val >= 0.0 && split.train + split.val <= 1.0)) {
    throw UsageError("split fractions must be non-negative and sum to at most 1");
  }
  Corpus corpus;
  corpus.subjects.reserve(static_cast<std::size_t>(n_subjects));
  for (std::int64_t s = 0; s < n_subjects; ++s) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.rng_seed), static_cast<std::uint32_t>(spec.rng_seed >> 32),
                      static_cast<std::uint32_t>(s)};
    Rng rng(seq);
    CorpusSubject subject{generate_structure(spec, rng), {}, {}};
    subject.target = render_domain(subject.structure, c_target, rng);
    for (const auto& c : c_sources) subject.sources.push_back(render_domain(subject.structure, c, rng));
    corpus.subjects.push_back(std::move(subject));
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(n_subjects));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  Rng shuffle_rng(spec.rng_seed ^ 0x5851f42d4c957f2dULL);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const auto n = static_cast<double>(n_subjects);
  auto n_train = std::max<std::int64_t>(1, std::llround(split.train * n));
  n_train = std::min(n_train, n_subjects);
  const auto n_val = std::min<std::int64_t>(std::llround(split.val * n), n_subjects - n_train);
  for (std::int64_t i = 0; i < n_subjects; ++i) {
    auto& bucket = i < n_train ? corpus.train : i < n_train + n_val ? corpus.val : corpus.test;
    bucket.push_back(order[static_cast<std::size_t>(i)]);
  }
  for (auto* b : {&corpus.train, &corpus.val, &corpus.test}) std::sort(b->begin(), b->end());
  return corpus;
}

namespace {

std::string subject_dir(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subject_%03zu", s);
  return buf;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "harmony-corpus";
  manifest["version"] = 1;
  manifest["subjects"] = nlohmann::json::array();
  for (std::size_t s = 0; s < corpus.subjects.size(); ++s) {
    const auto& subj = corpus.subjects[s];
    const std::string sd = subject_dir(s);
    std::filesystem::create_directories(dir / sd);
    nlohmann::json entry;
    entry["labels"] = sd + "/labels.hvol";
    entry["target"] = sd + "/target.hvol";
    save_volume(subj.structure.labels, dir / sd / "labels.hvol");
    save_volume(subj.target, dir / sd / "target.hvol");
    entry["sources"] = nlohmann::json::array();
    for (std::size_t k = 0; k < subj.sources.size(); ++k) {
      const std::string name = sd + "/source_" + std::to_string(k) + ".hvol";
      save_volume(subj.sources[k], dir / name);
      entry["sources"].push_back(name);
    }
    manifest["subjects"].push_back(entry);
  }
  manifest["split"] = {{"train", corpus.train}, {"val", corpus.val}, {"test", corpus.test}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

CorpusManifest read_corpus_manifest(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    const auto bytes = read_file(dir / "manifest.json");
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus manifest is malformed: ") + e.what());
  }
  if (j.value("format", "") != "harmony-corpus" || j.value("version", 0) != 1) {
    throw DataError("not a version-1 corpus manifest: " + (dir / "manifest.json").string());
  }
  CorpusManifest m;
  try {
    const auto base = std::filesystem::absolute(dir);
    for (const auto& e : j.at("subjects")) {
      CorpusManifest::Entry entry{base / e.at("labels").get<std::string>(), base / e.at("target").get<std::string>(),
                                  {}};
      for (const auto& s : e.at("sources")) entry.sources.push_back(base / s.get<std::string>());
      m.subjects.push_back(std::move(entry));
    }
    m.train = j.at("split").at("train").get<std::vector<std::int64_t>>();
    m.val = j.at("split").at("val").get<std::vector<std::int64_t>>();
    m.test = j.at("split").at("test").get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus manifest is malformed: ") + e.what());
  }
  const auto n = static_cast<std::int64_t>(m.subjects.size());
  for (const auto* b : {&m.train, &m.val, &m.test}) {
    for (auto i : *b) {
      if (i < 0 || i >= n) throw DataError("corpus split index out of range");
    }
  }
  return m;
}

}  // namespace harmony
