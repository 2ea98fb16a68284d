// Runs the twelve acceptance checks on phantom data and prints one PASS/FAIL
// line per check. Exits nonzero when any check fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "harmony/baselines.hpp"
#include "harmony/edges.hpp"
#include "harmony/field.hpp"
#include "harmony/flow.hpp"
#include "harmony/io.hpp"
#include "harmony/metrics.hpp"
#include "harmony/phantom.hpp"
#include "harmony/refine.hpp"
#include "support.hpp"

using namespace harmony;
using harmony::test::random_volume;
using harmony::test::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

class Stopwatch {
public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

// --- shared phantom corpus and trained field -------------------------------

PhantomSpec small_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.dims = {32, 32, 32};
  s.rng_seed = seed;
  return s;
}

struct Shared {
  Corpus corpus;
  std::vector<Volume3D> train_volumes;
  std::vector<EdgeMap> train_edges;
  std::optional<VelocityField<float>> field;
  std::vector<double> loss_trace;
  double train_seconds = 0.0;
};

Shared make_shared_corpus() {
  Shared s;
  s.corpus = generate_corpus(small_spec(0), 16, target_contrast(), source_contrasts(), SplitFractions{0.5, 0.0});
  for (auto i : s.corpus.train) {
    s.train_volumes.push_back(s.corpus.subjects[static_cast<std::size_t>(i)].target);
    s.train_edges.push_back(adaptive_edge_detect(s.train_volumes.back(), {}));
  }
  return s;
}

struct TrainSetup {
  Architecture arch;
  FlowTrainConfig flow;
  PatchSamplerConfig patches;
  std::uint64_t init_seed = 1;
};

TrainSetup main_setup() {
  TrainSetup t;
  t.arch.base_width = 16;
  t.flow.learning_rate = 2e-3;
  t.flow.batch_size = 4;
  t.flow.steps = 2000;
  t.flow.rng_seed = 3;
  t.patches.patch_size = 16;
  t.patches.multistride_ratio = 0.2;
  t.patches.rng_seed = 4;
  return t;
}

TrainResult run_training(const TrainSetup& t, const Shared& s) {
  Rng init(t.init_seed);
  VelocityField<float> field(t.arch, init_params<float>(t.arch, init));
  return train(std::move(field), s.train_volumes, s.train_edges, t.flow, t.patches);
}

SamplerConfig sampler_for(std::int64_t subject) {
  SamplerConfig sc;
  sc.rng_seed = 1000 + static_cast<std::uint64_t>(subject);
  return sc;
}

// --- C1 -----------------------------------------------------------------

Outcome c1_edge_ratio() {
  PhantomSpec spec;  // 64^3 brain layout
  spec.rng_seed = 11;
  const auto corpus = generate_corpus(spec, 5, target_contrast(), source_contrasts());
  double lo = 1.0, hi = 0.0, slowest = 0.0;
  int n = 0, ok = 0;
  for (const auto& subj : corpus.subjects) {
    std::vector<const Volume3D*> vols{&subj.target};
    for (const auto& v : subj.sources) vols.push_back(&v);
    for (const auto* v : vols) {
      Stopwatch w;
      const auto e = adaptive_edge_detect(*v, {});
      const double sec = w.seconds();
      slowest = std::max(slowest, sec);
      lo = std::min(lo, e.edge_fraction);
      hi = std::max(hi, e.edge_fraction);
      ok += e.edge_fraction >= 0.075 && e.edge_fraction <= 0.090 && sec < 10.0;
      ++n;
    }
  }
  return {ok == n && n == 20,
          fmt("%d/%d volumes in [0.075, 0.090], fractions %.4f..%.4f, slowest %.2f s", ok, n, lo, hi, slowest)};
}

// --- C2 -----------------------------------------------------------------

Outcome c2_edge_consistency() {
  PhantomSpec spec;
  double min_clean = 1.0, min_noisy = 1.0;
  for (std::uint64_t seed : {21, 22, 23, 24}) {
    spec.rng_seed = seed;
    Rng rng(seed);
    const auto st = generate_structure(spec, rng);
    auto render = [&](ContrastFunction c, bool noisy) {
      if (noisy) {
        c.noise_sigma = 0.02;
      } else {
        c.noise_sigma = 0.0;
        c.bias_amplitude = 0.0;
      }
      Rng r(seed * 31 + 7);
      return adaptive_edge_detect(render_domain(st, c, r), {});
    };
    for (bool noisy : {false, true}) {
      const auto ref = render(target_contrast(), noisy);
      for (const auto& c : source_contrasts()) {
        double& worst = noisy ? min_noisy : min_clean;
        worst = std::min(worst, jaccard(ref, render(c, noisy)));
      }
    }
  }
  return {min_clean >= 0.90 && min_noisy >= 0.75,
          fmt("min Jaccard noise-free %.4f (>= 0.90), noise 0.02 %.4f (>= 0.75) over 12 pairs", min_clean, min_noisy)};
}

// --- C3 -----------------------------------------------------------------

Outcome c3_gradients() {
  Stopwatch w;
  Architecture arch;  // default network at f64
  Rng init(5);
  auto params = init_params<double>(arch, init);
  std::mt19937_64 jitter(6);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (auto& p : params) p += nd(jitter);  // the output conv starts at zero
  VelocityField<double> field(arch, params);

  PhantomSpec spec = small_spec(7);
  spec.dims = {24, 24, 24};
  Rng prng(7);
  const auto st = generate_structure(spec, prng);
  Rng rr(8);
  const auto vol = render_domain(st, target_contrast(), rr);
  const auto edges = adaptive_edge_detect(vol, {});
  PatchSamplerConfig pc;
  pc.patch_size = 8;
  Rng patch_rng(9);
  const auto patch = sample_simple_patch(vol, edges, pc, patch_rng);

  const Rng draw(10);
  auto loss_at = [&]() {
    Rng r = draw;
    return rectified_loss(field, patch, r).loss;
  };
  Rng r0 = draw;
  const auto analytic = rectified_loss(field, patch, r0).grads.values;

  std::mt19937_64 pick(11);
  std::uniform_int_distribution<std::int64_t> idx(0, field.parameter_count() - 1);
  double net_err = 0.0;
  for (int k = 0; k < 20; ++k) {
    const auto i = static_cast<std::size_t>(idx(pick));
    const double h = 1e-5, p0 = field.params()[i];
    field.params()[i] = p0 + h;
    const double up = loss_at();
    field.params()[i] = p0 - h;
    const double dn = loss_at();
    field.params()[i] = p0;
    const double fd = (up - dn) / (2 * h);
    net_err = std::max(net_err, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-8}));
  }

  double ncc_err = 0.0;
  for (std::uint64_t seed : {12, 13, 14}) {
    auto x = random_volume({4, 4, 4}, seed);
    const auto src = random_volume({4, 4, 4}, seed + 100);
    const auto g = grad_ncc(x, src);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const double h = 1e-6, x0 = x[i];
      x[i] = x0 + h;
      const double up = ncc(x, src);
      x[i] = x0 - h;
      const double dn = ncc(x, src);
      x[i] = x0;
      const double fd = (up - dn) / (2 * h);
      ncc_err = std::max(ncc_err, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-8}));
    }
  }
  const double sec = w.seconds();
  return {net_err < 1e-3 && ncc_err < 1e-5 && sec < 60.0,
          fmt("network max rel err %.2e (20 params, %lld total), NCC max rel err %.2e, %.1f s", net_err,
              static_cast<long long>(field.parameter_count()), ncc_err, sec)};
}

// --- C4 -----------------------------------------------------------------

Outcome c4_ode(const Shared& s) {
  std::mt19937_64 rng(15);
  std::normal_distribution<double> nd;
  std::vector<double> x0(500);
  for (auto& x : x0) x = nd(rng);
  SamplerConfig sc;
  const auto c_out = integrate([](std::span<const double>, double, std::span<double> o) { std::fill(o.begin(), o.end(), 0.37); },
                               x0, sc);
  const auto t_out = integrate(
      [](std::span<const double>, double t, std::span<double> o) { std::fill(o.begin(), o.end(), t); }, x0, sc);
  double c_err = 0.0, t_err = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    c_err = std::max(c_err, std::abs(c_out[i] - (x0[i] + 0.37)) / std::max(1.0, std::abs(x0[i])));
    t_err = std::max(t_err, std::abs(t_out[i] - (x0[i] + 0.5)) / std::max(1.0, std::abs(x0[i])));
  }
  const double eps = std::numeric_limits<double>::epsilon();
  const bool c_ok = c_err <= 32 * eps;
  // On a dyadic grid every partial sum is representable, so no rounding enters
  // and the midpoint rule has to land on x0 + 1/2 bit for bit.
  std::vector<double> grid(257);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = -4.0 + static_cast<double>(i) / 32.0;
  bool t_exact = true;
  for (std::int64_t n : {1, 4, 16, 64}) {
    SamplerConfig g;
    g.n_steps = n;
    const auto out = integrate(
        [](std::span<const double>, double t, std::span<double> o) { std::fill(o.begin(), o.end(), t); }, grid, g);
    for (std::size_t i = 0; i < grid.size(); ++i) t_exact = t_exact && out[i] == grid[i] + 0.5;
  }
  const bool t_ok = t_exact && t_err <= 32 * eps;

  double worst = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto i = s.corpus.test[k];
    const auto& src = s.corpus.subjects[static_cast<std::size_t>(i)].sources[1];
    const auto edges = adaptive_edge_detect(src, {});
    auto sc16 = sampler_for(i), sc64 = sampler_for(i);
    sc64.n_steps = 64;
    const auto a = harmonize_from_edges(*s.field, edges, src, sc16);
    const auto b = harmonize_from_edges(*s.field, edges, src, sc64);
    double d2 = 0.0, b2 = 0.0;
    for (std::int64_t j = 0; j < a.size(); ++j) {
      d2 += (a[j] - b[j]) * (a[j] - b[j]);
      b2 += b[j] * b[j];
    }
    worst = std::max(worst, std::sqrt(d2 / b2));
  }
  return {c_ok && t_ok && worst < 0.05,
          fmt("constant field max err %.0f eps, v=t max err %.0f eps on random x0 and bit-exact on a dyadic grid: %s, "
              "16 vs 64 steps RMS ratio max %.4f over 3 subjects",
              c_err / eps, t_err / eps, t_exact ? "yes" : "no", worst)};
}

// --- C5 -----------------------------------------------------------------

Outcome c5_training(Shared& s) {
  const auto setup = main_setup();
  Stopwatch w;
  auto res = run_training(setup, s);
  s.train_seconds = w.seconds();
  s.field = std::move(res.field);
  s.loss_trace = res.loss_trace;
  const auto& tr = s.loss_trace;
  const double first = std::accumulate(tr.begin(), tr.begin() + 100, 0.0) / 100.0;
  const double last = std::accumulate(tr.end() - 100, tr.end(), 0.0) / 100.0;

  // Determinism: two identically seeded short runs agree bit for bit.
  auto brief = setup;
  brief.flow.steps = 25;
  const auto r1 = run_training(brief, s);
  const auto r2 = run_training(brief, s);
  const bool same = r1.loss_trace == r2.loss_trace &&
                    std::equal(r1.field.params().begin(), r1.field.params().end(), r2.field.params().begin());
  // The long run's prefix must match the short run as well.
  const bool prefix = std::equal(r1.loss_trace.begin(), r1.loss_trace.end(), tr.begin());
  return {last / first < 0.5 && same && prefix,
          fmt("%zu train subjects, last100/first100 = %.4f / %.4f = %.3f, repeat runs identical: %s, prefix match: %s, "
              "%.0f s",
              s.train_volumes.size(), last, first, last / first, same ? "yes" : "no", prefix ? "yes" : "no",
              s.train_seconds)};
}

// --- C7 / C8 ----------------------------------------------------------------

struct CaseResult {
  std::int64_t subject = 0;
  std::size_t source = 0;
  double psnr_src = 0, psnr_flow = 0, psnr_ncc = 0, psnr_mi = 0;
  double ssim_src = 0, ssim_flow = 0, ssim_ncc = 0, ssim_mi = 0;
  bool ncc_monotone = false;
};

std::vector<CaseResult> run_test_set(const Shared& s) {
  std::vector<CaseResult> out;
  RefineConfig ncc_cfg;
  RefineConfig mi_cfg;
  mi_cfg.metric = RefineMetric::mi;
  for (auto i : s.corpus.test) {
    const auto& subj = s.corpus.subjects[static_cast<std::size_t>(i)];
    const auto mask = threshold_mask(subj.target, 0.1);
    for (std::size_t k = 0; k < subj.sources.size(); ++k) {
      const auto& src = subj.sources[k];
      const auto flow = harmonize_from_edges(*s.field, adaptive_edge_detect(src, {}), src, sampler_for(i));
      const auto rn = refine(flow, src, ncc_cfg);
      const auto rm = refine(flow, src, mi_cfg);
      CaseResult c;
      c.subject = i;
      c.source = k;
      c.psnr_src = psnr(src, subj.target, mask);
      c.psnr_flow = psnr(flow, subj.target, mask);
      c.psnr_ncc = psnr(rn.volume, subj.target, mask);
      c.psnr_mi = psnr(rm.volume, subj.target, mask);
      c.ssim_src = ssim3d(src, subj.target, mask);
      c.ssim_flow = ssim3d(flow, subj.target, mask);
      c.ssim_ncc = ssim3d(rn.volume, subj.target, mask);
      c.ssim_mi = ssim3d(rm.volume, subj.target, mask);
      c.ncc_monotone = rn.trace.size() == 7 && std::is_sorted(rn.trace.begin(), rn.trace.end());
      out.push_back(c);
    }
  }
  std::printf("  subject source | PSNR src  flow   ncc    mi   | SSIM src   flow   ncc    mi\n");
  for (const auto& c : out)
    std::printf("  %7lld %6zu | %5.2f %6.2f %6.2f %6.2f | %6.3f %6.3f %6.3f %6.3f\n", static_cast<long long>(c.subject),
                c.source, c.psnr_src, c.psnr_flow, c.psnr_ncc, c.psnr_mi, c.ssim_src, c.ssim_flow, c.ssim_ncc, c.ssim_mi);
  return out;
}

// A contrast has a substantial gap when its mean source PSNR is below 20 dB.
Outcome c7_harmonization(const std::vector<CaseResult>& cases) {
  bool any = false;
  std::string detail;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<double> ps, ss, hs;
    int gained = 0, n = 0;
    for (const auto& c : cases) {
      if (c.source != k) continue;
      ps.push_back(c.psnr_src);
      ss.push_back(c.ssim_src);
      hs.push_back(c.ssim_ncc);
      gained += c.psnr_ncc - c.psnr_src >= 1.0;
      ++n;
    }
    const bool gap = mean_of(ps) < 20.0;
    const bool pass = gap && gained >= 0.8 * n && mean_of(hs) >= mean_of(ss);
    any = any || pass;
    detail += fmt("%ssource %zu: gap %.2f dB%s, +1 dB on %d/%d, SSIM %.4f -> %.4f", k ? "; " : "", k, mean_of(ps),
                  gap ? " (substantial)" : "", gained, n, mean_of(ss), mean_of(hs));
  }
  return {any, detail};
}

Outcome c8_refinement(const std::vector<CaseResult>& cases) {
  std::vector<double> flow, ncc_v, mi_v;
  int monotone = 0;
  for (const auto& c : cases) {
    flow.push_back(c.psnr_flow);
    ncc_v.push_back(c.psnr_ncc);
    mi_v.push_back(c.psnr_mi);
    monotone += c.ncc_monotone;
  }
  const int n = static_cast<int>(cases.size());
  return {mean_of(ncc_v) >= mean_of(flow) && monotone == n,
          fmt("mean PSNR NCC %.2f, MI %.2f, none %.2f; NCC trace non-decreasing on %d/%d", mean_of(ncc_v), mean_of(mi_v),
              mean_of(flow), monotone, n)};
}

// --- C9 -----------------------------------------------------------------

// Lesion mean minus the mean of the white matter within 3 voxels of it.
double lesion_contrast(const Volume3D& v, const Structure& st) {
  const Dims d = v.dims();
  const auto& les = *st.lesion;
  double in = 0.0, ring = 0.0;
  std::int64_t n_in = 0, n_ring = 0;
  for (std::int64_t z = 0; z < d.nz; ++z)
    for (std::int64_t y = 0; y < d.ny; ++y)
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = static_cast<std::size_t>(v.index(x, y, z));
        if (les[i]) {
          in += v[static_cast<std::int64_t>(i)];
          ++n_in;
          continue;
        }
        if (std::llround(st.labels(x, y, z)) != tissue::white) continue;
        bool near = false;
        for (std::int64_t dz = -3; dz <= 3 && !near; ++dz)
          for (std::int64_t dy = -3; dy <= 3 && !near; ++dy)
            for (std::int64_t dx = -3; dx <= 3 && !near; ++dx) {
              const std::int64_t a = x + dx, b = y + dy, c = z + dz;
              if (a < 0 || b < 0 || c < 0 || a >= d.nx || b >= d.ny || c >= d.nz) continue;
              near = les[static_cast<std::size_t>(v.index(a, b, c))] != 0;
            }
        if (near) {
          ring += v[static_cast<std::int64_t>(i)];
          ++n_ring;
        }
      }
  return in / static_cast<double>(n_in) - ring / static_cast<double>(std::max<std::int64_t>(n_ring, 1));
}

Outcome c9_lesions(const Shared& s) {
  auto spec = small_spec(31);
  spec.lesion = true;
  const auto corpus = generate_corpus(spec, 6, target_contrast(), source_contrasts());
  int applicable = 0, kept = 0;
  std::printf("  subject source | contrast src   flow  refined | flow kept  refined kept | case\n");
  for (std::size_t i = 0; i < corpus.subjects.size(); ++i) {
    const auto& subj = corpus.subjects[i];
    for (std::size_t k = 0; k < subj.sources.size(); ++k) {
      const auto& src = subj.sources[k];
      const auto flow =
          harmonize_from_edges(*s.field, adaptive_edge_detect(src, {}), src, sampler_for(100 + static_cast<std::int64_t>(i)));
      const auto refined = refine(flow, src, RefineConfig{}).volume;
      const double cs = lesion_contrast(src, subj.structure);
      const double cf = lesion_contrast(flow, subj.structure) / cs;
      const double cr = lesion_contrast(refined, subj.structure) / cs;
      const bool lost = cf <= 0.5;
      const bool ok = cr >= 0.5;
      applicable += lost;
      kept += lost && ok;
      std::printf("  %7zu %6zu | %12.3f %6.3f %8.3f | %9.2f %13.2f | %s\n", i, k, cs, cs * cf, cs * cr, cf, cr,
                  !lost ? "flow kept lesion" : (ok ? "PASS" : "FAIL"));
    }
  }
  return {applicable > 0 && kept == applicable,
          fmt("refined keeps >= 50%% of the source lesion contrast in %d/%d cases where flow lost >= 50%% (18 cases)",
              kept, applicable)};
}

// --- C6 -----------------------------------------------------------------

// Reconstruction PSNR of held-out targets from their own edge maps.
Outcome c6_multistride(const Shared& s) {
  std::vector<double> gains;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    double psnr_at[2] = {0, 0};
    for (int r = 0; r < 2; ++r) {
      TrainSetup t;
      t.arch.base_width = 8;
      t.flow.learning_rate = 2e-3;
      t.flow.batch_size = 4;
      t.flow.steps = 1500;
      t.flow.rng_seed = 50 + seed;
      t.patches.patch_size = 16;
      t.patches.multistride_ratio = r == 0 ? 0.0 : 0.2;
      t.patches.rng_seed = 60 + seed;
      t.init_seed = 70 + seed;
      const auto field = run_training(t, s).field;
      std::vector<double> ps;
      for (auto i : s.corpus.test) {
        const auto& target = s.corpus.subjects[static_cast<std::size_t>(i)].target;
        const auto out = harmonize_from_edges(field, adaptive_edge_detect(target, {}), target, sampler_for(i));
        ps.push_back(psnr(out, target, threshold_mask(target, 0.1)));
      }
      psnr_at[r] = mean_of(ps);
    }
    gains.push_back(psnr_at[1] - psnr_at[0]);
    detail += fmt("seed %llu: rho 0 %.3f dB, rho 0.2 %.3f dB; ", static_cast<unsigned long long>(seed), psnr_at[0],
                  psnr_at[1]);
  }
  const double g = mean_of(gains);
  return {g >= -0.1, detail + fmt("mean difference %+.3f dB (>= -0.1)", g)};
}

// --- C10 ----------------------------------------------------------------

Outcome c10_baselines(const Shared& s) {
  double worst_sup_ratio = 0.0;
  for (std::int64_t bins : {64, 256, 1024}) {
    const auto hist = build_target_histogram(s.train_volumes, bins);
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& src = s.corpus.subjects[static_cast<std::size_t>(s.corpus.test[0])].sources[k];
      auto out = histogram_match(src, hist);
      std::sort(out.values().begin(), out.values().end());
      double sup = 0.0;
      for (std::int64_t j = 0; j < bins; ++j) {
        const double edge = static_cast<double>(j + 1) / static_cast<double>(bins);
        const auto below = std::upper_bound(out.values().begin(), out.values().end(), edge) - out.values().begin();
        sup = std::max(sup, std::abs(static_cast<double>(below) / static_cast<double>(out.size()) -
                                     hist.cdf[static_cast<std::size_t>(j)]));
      }
      worst_sup_ratio = std::max(worst_sup_ratio, sup * static_cast<double>(bins) / 2.0);
    }
  }

  const auto target_mean = mean_volume(s.train_volumes);
  const auto& src = s.corpus.subjects[static_cast<std::size_t>(s.corpus.test[0])].sources[1];
  const auto swapped = ssimh(src, target_mean, 3.0);
  const bool exact = std::equal(target_mean.values().begin(), target_mean.values().end(), swapped.values().begin());

  double rt = 0.0;
  for (const auto* v : {&src, &target_mean}) {
    const auto back = idct3(dct3(*v));
    for (std::int64_t i = 0; i < v->size(); ++i) rt = std::max(rt, std::abs(back[i] - (*v)[i]));
  }
  const auto noise = random_volume({32, 24, 20}, 16);
  const auto back = idct3(dct3(noise));
  for (std::int64_t i = 0; i < noise.size(); ++i) rt = std::max(rt, std::abs(back[i] - noise[i]));
  return {worst_sup_ratio < 1.0 && exact && rt < 1e-10,
          fmt("histmatch sup distance at most %.3f x 2/bins (bins 64/256/1024), full-cutoff ssimh exact: %s, DCT "
              "round trip %.1e",
              worst_sup_ratio, exact ? "yes" : "no", rt)};
}

// --- C11 ----------------------------------------------------------------

double brute_psnr(const Volume3D& a, const Volume3D& b, const Mask* m) {
  double s = 0.0;
  int n = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (m && !(*m)[static_cast<std::size_t>(i)]) continue;
    s += (a[i] - b[i]) * (a[i] - b[i]);
    ++n;
  }
  return 10.0 * std::log10(1.0 / (s / n));
}

double brute_ssim3(const Volume3D& a, const Volume3D& b, const Mask* m) {
  const double sigma = 1.5;
  double g[3], gs = 0.0;
  for (int k = 0; k < 3; ++k) gs += g[k] = std::exp(-double((k - 1) * (k - 1)) / (2 * sigma * sigma));
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0.0;
  int n = 0;
  for (int z = 1; z < 3; ++z)
    for (int y = 1; y < 3; ++y)
      for (int x = 1; x < 3; ++x) {
        if (m && !(*m)[static_cast<std::size_t>(a.index(x, y, z))]) continue;
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int k = -1; k <= 1; ++k)
          for (int j = -1; j <= 1; ++j)
            for (int i = -1; i <= 1; ++i) {
              const double w = g[i + 1] * g[j + 1] * g[k + 1] / (gs * gs * gs);
              const double p = a(x + i, y + j, z + k), q = b(x + i, y + j, z + k);
              mx += w * p;
              my += w * q;
              sxx += w * p * p;
              syy += w * q * q;
              sxy += w * p * q;
            }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        acc += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++n;
      }
  return acc / n;
}

Outcome c11_metrics() {
  double worst = 0.0;
  auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  SsimConfig sc;
  sc.window = 3;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto a = random_volume({4, 4, 4}, seed);
    const auto b = random_volume({4, 4, 4}, seed + 50);
    Mask m(64, 0);
    std::mt19937_64 r(seed);
    for (auto& x : m) x = r() % 3 != 0;
    m[static_cast<std::size_t>(a.index(1, 1, 1))] = 1;
    track(psnr(a, b), brute_psnr(a, b, nullptr));
    track(psnr(a, b, m), brute_psnr(a, b, &m));
    track(ssim3d(a, b, std::nullopt, sc), brute_ssim3(a, b, nullptr));
    track(ssim3d(a, b, m, sc), brute_ssim3(a, b, &m));

    Volume3D la({4, 4, 4}), lb({4, 4, 4});
    for (std::int64_t i = 0; i < 64; ++i) {
      la[i] = static_cast<double>(r() % 4);
      lb[i] = static_cast<double>(r() % 4);
    }
    const auto per = dice_per_label(la, lb);
    for (int l = 1; l < 4; ++l) {
      int na = 0, nb = 0, both = 0;
      for (std::int64_t i = 0; i < 64; ++i) {
        na += la[i] == l;
        nb += lb[i] == l;
        both += la[i] == l && lb[i] == l;
      }
      const double want = na + nb == 0 ? 1.0 : 2.0 * both / (na + nb);
      track(per.count(l) ? per.at(l) : 1.0, want);
    }
    double e = 0.0;
    for (std::int64_t i = 0; i < 64; ++i) e += std::abs(a[i] - b[i]);
    track(mae(a.values(), b.values()), e / 64.0);
  }
  return {worst < 1e-9, fmt("max deviation from brute force %.1e over 10 fixtures", worst)};
}

// --- C12 ----------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void run_pipeline(const std::filesystem::path& dir) {
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  spec.n_shapes = 4;
  spec.rng_seed = 7;
  const auto corpus = generate_corpus(spec, 4, target_contrast(), source_contrasts());
  write_corpus(corpus, dir / "corpus");
  const auto manifest = read_corpus_manifest(dir / "corpus");

  std::vector<Volume3D> vols;
  std::vector<EdgeMap> edges;
  for (auto i : manifest.train) {
    vols.push_back(load_volume(manifest.subjects[static_cast<std::size_t>(i)].target));
    edges.push_back(adaptive_edge_detect(vols.back(), {}));
    save_volume(edges.back().to_volume(), dir / ("edges_" + std::to_string(i) + ".hvol"));
  }
  Architecture arch;
  arch.base_width = 4;
  arch.time_dim = 4;
  Rng init(7);
  FlowTrainConfig fc;
  fc.steps = 20;
  fc.batch_size = 2;
  fc.learning_rate = 2e-3;
  fc.rng_seed = 8;
  PatchSamplerConfig pc;
  pc.patch_size = 8;
  pc.rng_seed = 9;
  const auto res = train(VelocityField<float>(arch, init_params<float>(arch, init)), vols, edges, fc, pc);
  save_checkpoint(res.field, dir / "model.ckpt");
  save_loss_trace_csv(res.loss_trace, dir / "loss.csv");

  const auto field = load_checkpoint(dir / "model.ckpt");
  const auto& entry = manifest.subjects[static_cast<std::size_t>(manifest.test[0])];
  const auto src = load_volume(entry.sources[0]);
  SamplerConfig sc;
  sc.rng_seed = 10;
  sc.n_steps = 4;
  const auto flow = harmonize(field, src, {}, sc);
  save_volume(flow, dir / "flow.hvol");
  const auto refined = refine(flow, src, RefineConfig{}).volume;
  save_volume(refined, dir / "harmonized.hvol");
  const auto truth = load_volume(entry.target);
  const std::vector<MetricsRow> rows{{"flow", evaluate(flow, truth)}, {"harmonized", evaluate(refined, truth)}};
  write_metrics_csv(rows, dir / "metrics.csv");
}

Outcome c12_determinism() {
  TempDir a("accept_a"), b("accept_b");
  run_pipeline(a.path());
  run_pipeline(b.path());
  int files = 0, same = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    ++files;
    same += std::filesystem::exists(b.path() / rel) && slurp(entry.path()) == slurp(b.path() / rel);
  }
  return {files > 0 && same == files, fmt("%d/%d output files byte-identical across two runs", same, files)};
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, Outcome>> results;
  auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
    std::printf("%s running\n", name.c_str());
    std::fflush(stdout);
    Stopwatch w;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s %s [%.0f s]\n", name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), w.seconds());
    std::fflush(stdout);
    results.emplace_back(name, o);
  };

  report("C1 edge ratio", c1_edge_ratio);
  report("C2 cross-domain edges", c2_edge_consistency);
  report("C3 gradients", c3_gradients);
  report("C10 baselines", [] {
    const auto s = make_shared_corpus();
    return c10_baselines(s);
  });
  report("C11 metric oracles", c11_metrics);
  report("C12 determinism", c12_determinism);

  Shared shared = make_shared_corpus();
  report("C5 flow training", [&] { return c5_training(shared); });
  const bool have_field = shared.field.has_value();
  auto needs_field = [&](const std::function<Outcome()>& fn) {
    return [&, fn] { return have_field ? fn() : Outcome{false, "no trained field"}; };
  };
  report("C4 ODE sampler", needs_field([&] { return c4_ode(shared); }));
  std::vector<CaseResult> cases;
  report("C7 harmonization", needs_field([&] {
           cases = run_test_set(shared);
           return c7_harmonization(cases);
         }));
  report("C8 refinement ablation", [&] { return cases.empty() ? Outcome{false, "no test results"} : c8_refinement(cases); });
  report("C9 lesion preservation", needs_field([&] { return c9_lesions(shared); }));
  report("C6 multi-stride trend", [&] { return c6_multistride(shared); });

  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) {
    return std::stoi(a.first.substr(1)) < std::stoi(b.first.substr(1));
  });
  std::printf("\nsummary\n");
  int failed = 0;
  for (const auto& [name, o] : results) {
    std::printf("%s %s\n", o.pass ? "PASS" : "FAIL", name.c_str());
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
