#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "harmony/error.hpp"
#include "harmony/refine.hpp"
#include "support.hpp"

using namespace harmony;
using harmony::test::random_volume;

namespace {

double brute_ncc(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Joint histogram from untruncated Gaussian weights, then MI in nats.
double brute_mi(std::span<const double> x, std::span<const double> s, int bins, double sigma) {
  std::vector<double> j(static_cast<std::size_t>(bins * bins), 0.0);
  auto w = [&](double v, int k) {
    const double d = v - static_cast<double>(k) / (bins - 1);
    return std::exp(-d * d / (2 * sigma * sigma));
  };
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int k = 0; k < bins; ++k)
      for (int l = 0; l < bins; ++l) j[static_cast<std::size_t>(k * bins + l)] += w(x[i], k) * w(s[i], l);
  const double total = std::accumulate(j.begin(), j.end(), 0.0);
  std::vector<double> px(static_cast<std::size_t>(bins), 0.0), ps(static_cast<std::size_t>(bins), 0.0);
  for (int k = 0; k < bins; ++k)
    for (int l = 0; l < bins; ++l) {
      const double p = j[static_cast<std::size_t>(k * bins + l)] / total;
      px[static_cast<std::size_t>(k)] += p;
      ps[static_cast<std::size_t>(l)] += p;
    }
  double mi = 0.0;
  for (int k = 0; k < bins; ++k)
    for (int l = 0; l < bins; ++l) {
      const double p = j[static_cast<std::size_t>(k * bins + l)] / total;
      if (p > 1e-300) mi += p * std::log(p / (px[static_cast<std::size_t>(k)] * ps[static_cast<std::size_t>(l)]));
    }
  return mi;
}

}  // namespace

TEST_SUITE("refine") {
  TEST_CASE("NCC identities") {
    const auto a = random_volume({5, 4, 3}, 1);
    const auto b = random_volume({5, 4, 3}, 2);
    CHECK(ncc(a, a) == doctest::Approx(1.0));
    auto affine = a;
    for (auto& x : affine.values()) x = 3.0 * x - 2.0;
    CHECK(ncc(a, affine) == doctest::Approx(1.0));
    auto neg = a;
    for (auto& x : neg.values()) x = -0.5 * x + 1.0;
    CHECK(ncc(a, neg) == doctest::Approx(-1.0));
    CHECK(ncc(a, b) == doctest::Approx(brute_ncc(a.values(), b.values())).epsilon(1e-12));
    CHECK(ncc(a, b) == doctest::Approx(ncc(b, a)).epsilon(1e-14));
    CHECK_THROWS_AS(ncc(a, Volume3D({5, 4, 3}, {}, 0.3)), DegenerateInputError);
    CHECK_THROWS_AS(ncc(a, random_volume({4, 4, 3}, 1)), ShapeError);

    // masked NCC is NCC of the masked subsequences
    Mask m(static_cast<std::size_t>(a.size()), 0);
    std::vector<double> sa, sb;
    for (std::size_t i = 0; i < m.size(); i += 2) {
      m[i] = 1;
      sa.push_back(a.values()[i]);
      sb.push_back(b.values()[i]);
    }
    CHECK(ncc(a, b, m) == doctest::Approx(brute_ncc(sa, sb)).epsilon(1e-12));
  }

  TEST_CASE("NCC gradient: finite differences, invariances and stationary points") {
    const auto x = random_volume({4, 4, 4}, 3);
    const auto s = random_volume({4, 4, 4}, 4);
    const auto g = grad_ncc(x, s);
    auto probe = x;
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const double h = 1e-6;
      probe[i] = x[i] + h;
      const double up = ncc(probe, s);
      probe[i] = x[i] - h;
      const double dn = ncc(probe, s);
      probe[i] = x[i];
      REQUIRE(std::abs((up - dn) / (2 * h) - g[i]) < 1e-5);
    }
    // NCC is unchanged by adding a constant or scaling x
    double sum = 0.0, along = 0.0;
    const double mean = std::accumulate(x.values().begin(), x.values().end(), 0.0) / static_cast<double>(x.size());
    for (std::int64_t i = 0; i < x.size(); ++i) {
      sum += g[i];
      along += g[i] * (x[i] - mean);
    }
    CHECK(std::abs(sum) < 1e-12);
    CHECK(std::abs(along) < 1e-12);

    auto aff = s;
    for (auto& v : aff.values()) v = 2.0 * v + 0.1;
    for (double v : grad_ncc(aff, s).values()) CHECK(std::abs(v) < 1e-12);

    Mask m(64, 0);
    for (std::size_t i = 0; i < 64; i += 3) m[i] = 1;
    const auto gm = grad_ncc(x, s, m);
    for (std::size_t i = 0; i < 64; ++i) {
      if (!m[i]) CHECK(gm[static_cast<std::int64_t>(i)] == 0.0);
    }
  }

  TEST_CASE("NCC refinement: zero iterations, monotone trace, none") {
    const auto x = random_volume({6, 6, 6}, 5);
    auto s = random_volume({6, 6, 6}, 6);
    for (std::int64_t i = 0; i < s.size(); ++i) s[i] = 0.5 * s[i] + 0.5 * x[i];
    RefineConfig cfg;
    cfg.iterations = 0;
    const auto r0 = refine(x, s, cfg);
    CHECK(r0.volume == x);
    CHECK(r0.trace.size() == 1);

    cfg.iterations = 10;
    cfg.step_size = 0.01;
    const auto r = refine(x, s, cfg);
    REQUIRE(r.trace.size() == 11);
    for (std::size_t k = 1; k < r.trace.size(); ++k) CHECK(r.trace[k] > r.trace[k - 1]);
    CHECK(r.trace.back() == doctest::Approx(ncc(r.volume, s)));

    // raw scaling divides the effective step by the voxel count
    cfg.gradient_scale = GradientScale::raw;
    cfg.step_size = 0.01 * 216;
    const auto raw = refine(x, s, cfg);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(raw.volume[i] == doctest::Approx(r.volume[i]).epsilon(1e-12));

    cfg.metric = RefineMetric::none;
    const auto none = refine(x, s, cfg);
    CHECK(none.volume == x);
    CHECK(none.trace.empty());

    cfg.step_size = 0.0;
    CHECK_THROWS_AS(refine(x, s, cfg), UsageError);
    cfg.step_size = 0.01;
    cfg.mi_step_size = -1.0;
    CHECK_THROWS_AS(refine(x, s, cfg), UsageError);
  }

  TEST_CASE("KDE histogram sums to one, is flat for a ramp and symmetric around a spike") {
    std::vector<double> ramp(4096);
    for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = (static_cast<double>(i) + 0.5) / 4096.0;
    const Volume3D r({16, 16, 16}, {}, ramp);
    const auto h = kde_histogram(r, 32, 0.01);
    CHECK(std::accumulate(h.begin(), h.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    const double interior = h[15];
    for (std::size_t k = 1; k + 1 < h.size(); ++k) CHECK(std::abs(h[k] / interior - 1.0) < 0.02);
    // end bins only see half a kernel
    CHECK(h.front() / interior == doctest::Approx(0.5).epsilon(0.05));

    const Volume3D spike({2, 2, 2}, {}, 0.5);
    const auto hs = kde_histogram(spike, 33, 0.05);
    CHECK(std::max_element(hs.begin(), hs.end()) - hs.begin() == 16);
    for (std::size_t k = 0; k < 16; ++k) CHECK(hs[k] == doctest::Approx(hs[32 - k]).epsilon(1e-12));

    CHECK_THROWS_AS(kde_histogram(Volume3D({2, 2, 2}, {}, 5.0), 16, 0.01), DegenerateInputError);
  }

  TEST_CASE("mutual information against a brute-force joint histogram") {
    const auto x = random_volume({4, 4, 4}, 7);
    const auto s = random_volume({4, 4, 4}, 8);
    CHECK(mutual_information(x, s, 16, 0.05) ==
          doctest::Approx(brute_mi(x.values(), s.values(), 16, 0.05)).epsilon(1e-10));
    CHECK(mutual_information(x, x, 16, 0.05) ==
          doctest::Approx(brute_mi(x.values(), x.values(), 16, 0.05)).epsilon(1e-10));

    // MI(v, v) exceeds MI(v, shuffled v)
    auto shuffled = x;
    std::mt19937_64 rng(9);
    std::shuffle(shuffled.values().begin(), shuffled.values().end(), rng);
    CHECK(mutual_information(x, x, 32, 0.02) > mutual_information(x, shuffled, 32, 0.02));
    CHECK(mutual_information(x, s, 32, 0.02) >= -1e-12);
  }

  TEST_CASE("MI gradient matches finite differences") {
    auto x = random_volume({3, 3, 3}, 10, 0.1, 0.9);
    const auto s = random_volume({3, 3, 3}, 11, 0.1, 0.9);
    const auto g = grad_mi(x.values(), s.values(), 16, 0.06);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const double h = 1e-6, x0 = x[i];
      x[i] = x0 + h;
      const double up = mutual_information(x, s, 16, 0.06);
      x[i] = x0 - h;
      const double dn = mutual_information(x, s, 16, 0.06);
      x[i] = x0;
      CHECK(g[static_cast<std::size_t>(i)] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-4).scale(1e-8));
    }
  }

  TEST_CASE("MI refinement raises MI and stays in range") {
    const auto s = random_volume({6, 6, 6}, 12);
    auto x = random_volume({6, 6, 6}, 13);
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = 0.7 * x[i] + 0.3 * (1.0 - s[i]);
    RefineConfig cfg;
    cfg.metric = RefineMetric::mi;
    cfg.mi_bins = 32;
    cfg.mi_sigma = 0.03;
    cfg.iterations = 5;
    cfg.mi_step_size = 0.001;
    const auto r = refine(x, s, cfg);
    REQUIRE(r.trace.size() == 6);
    CHECK(r.trace.back() > r.trace.front());
    for (double v : r.volume.values()) CHECK((v >= 0.0 && v <= 1.0));
  }
}
