#include "harmony/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "harmony/error.hpp"

namespace harmony {

double TargetHistogram::inverse(double u) const {
  if (u <= 0.0) return 0.0;
  const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) return 1.0;
  const auto j = static_cast<std::int64_t>(it - cdf.begin());
  const double lo = j == 0 ? 0.0 : cdf[static_cast<std::size_t>(j - 1)];
  const double hi = *it;
  const double width = 1.0 / static_cast<double>(bins);
  const double frac = hi > lo ? (u - lo) / (hi - lo) : 1.0;
  return (static_cast<double>(j) + frac) * width;
}

double TargetHistogram::evaluate(double x) const {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double pos = x * static_cast<double>(bins);
  const auto j = std::min(static_cast<std::int64_t>(pos), bins - 1);
  const double lo = j == 0 ? 0.0 : cdf[static_cast<std::size_t>(j - 1)];
  return lo + (pos - static_cast<double>(j)) * (cdf[static_cast<std::size_t>(j)] - lo);
}

TargetHistogram build_target_histogram(std::span<const Volume3D> volumes, std::int64_t bins) {
  if (volumes.empty()) throw UsageError("target histogram needs at least one volume");
  if (bins < 1) throw UsageError("histogram bins must be >= 1");
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  double total = 0.0;
  for (const auto& v : volumes) {
    v.check_finite();
    for (double x : v.values()) {
      const double pos = std::ceil(x * static_cast<double>(bins)) - 1.0;
      const auto j = static_cast<std::int64_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
      counts[static_cast<std::size_t>(j)] += 1.0;
    }
    total += static_cast<double>(v.size());
  }
  if (!(total > 0.0)) throw DataError("target histogram volumes are empty");
  TargetHistogram h{bins, std::vector<double>(static_cast<std::size_t>(bins))};
  double acc = 0.0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    acc += counts[j];
    h.cdf[j] = acc / total;
  }
  h.cdf.back() = 1.0;
  return h;
}

Volume3D histogram_match(const Volume3D& src, const TargetHistogram& hist) {
  if (hist.bins < 1 || static_cast<std::int64_t>(hist.cdf.size()) != hist.bins) {
    throw UsageError("histogram_match: malformed target histogram");
  }
  src.check_finite();
  const auto values = src.values();
  const auto n = values.size();
  if (n == 0 || src.min() == src.max()) throw DegenerateInputError("histogram_match: source CDF is degenerate");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Volume3D out = src;
  auto dst = out.values();
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // Tied voxels share the midrank (i + j) / 2 of their run.
    const double u = 0.5 * static_cast<double>(i + j) / static_cast<double>(n);
    const double mapped = hist.inverse(u);
    for (std::size_t r = i; r < j; ++r) dst[order[r]] = mapped;
    i = j;
  }
  return out;
}

namespace {

// Row k holds s_k cos(pi (n + 1/2) k / N).
std::vector<double> dct_matrix(std::int64_t n) {
  std::vector<double> m(static_cast<std::size_t>(n * n));
  const double s0 = std::sqrt(1.0 / static_cast<double>(n));
  const double s = std::sqrt(2.0 / static_cast<double>(n));
  for (std::int64_t k = 0; k < n; ++k) {
    for (std::int64_t i = 0; i < n; ++i) {
      m[static_cast<std::size_t>(k * n + i)] =
          (k == 0 ? s0 : s) * std::cos(std::numbers::pi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) /
                                       static_cast<double>(n));
    }
  }
  return m;
}

// Applies the DCT matrix (or its transpose) along one axis in place.
void transform_axis(std::vector<double>& data, const Dims& d, int axis, bool inverse) {
  const std::int64_t n = d[axis];
  if (n == 1) return;
  const auto m = dct_matrix(n);
  const std::int64_t stride = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
  const std::int64_t lines = d.total() / n;
  std::vector<double> in(static_cast<std::size_t>(n));
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t line = 0; line < lines; ++line) {
    // Decompose the line number into the coordinates of the other two axes.
    std::int64_t base;
    if (axis == 0) {
      base = line * d.nx;
    } else if (axis == 1) {
      base = (line % d.nx) + (line / d.nx) * d.nx * d.ny;
    } else {
      base = line;
    }
    for (std::int64_t i = 0; i < n; ++i) in[static_cast<std::size_t>(i)] = data[static_cast<std::size_t>(base + i * stride)];
    for (std::int64_t k = 0; k < n; ++k) {
      double acc = 0.0;
      if (inverse) {
        for (std::int64_t i = 0; i < n; ++i) acc += m[static_cast<std::size_t>(i * n + k)] * in[static_cast<std::size_t>(i)];
      } else {
        for (std::int64_t i = 0; i < n; ++i) acc += m[static_cast<std::size_t>(k * n + i)] * in[static_cast<std::size_t>(i)];
      }
      out[static_cast<std::size_t>(k)] = acc;
    }
    for (std::int64_t k = 0; k < n; ++k) data[static_cast<std::size_t>(base + k * stride)] = out[static_cast<std::size_t>(k)];
  }
}

Volume3D separable(const Volume3D& v, bool inverse) {
  std::vector<double> data(v.values().begin(), v.values().end());
  for (int axis = 0; axis < 3; ++axis) transform_axis(data, v.dims(), axis, inverse);
  return Volume3D(v.dims(), v.spacing(), std::move(data));
}

}  // namespace

Volume3D dct3(const Volume3D& v) { return separable(v, false); }

Volume3D idct3(const Volume3D& c) { return separable(c, true); }

Volume3D mean_volume(std::span<const Volume3D> volumes) {
  if (volumes.empty()) throw UsageError("mean_volume needs at least one volume");
  Volume3D out(volumes.front().dims(), volumes.front().spacing());
  auto acc = out.values();
  for (const auto& v : volumes) {
    if (!(v.dims() == out.dims())) throw ShapeError("mean_volume: volumes differ in dims");
    const auto x = v.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
  }
  const double inv = 1.0 / static_cast<double>(volumes.size());
  for (double& a : acc) a *= inv;
  return out;
}

Volume3D ssimh(const Volume3D& src, const Volume3D& target_mean, double cutoff) {
  if (!(src.dims() == target_mean.dims())) throw ShapeError("ssimh: source and target mean differ in dims");
  if (std::isnan(cutoff)) throw UsageError("ssimh: cutoff is NaN");
  const Dims d = src.dims();
  auto in_region = [&](std::int64_t u, std::int64_t v, std::int64_t w) {
    return static_cast<double>(u) / static_cast<double>(d.nx) + static_cast<double>(v) / static_cast<double>(d.ny) +
               static_cast<double>(w) / static_cast<double>(d.nz) <
           cutoff;
  };
  if (!in_region(0, 0, 0)) return src;
  if (in_region(d.nx - 1, d.ny - 1, d.nz - 1)) {
    Volume3D out(d, src.spacing(), std::vector<double>(target_mean.values().begin(), target_mean.values().end()),
                 src.mask());
    return out;
  }
  Volume3D cs = dct3(src);
  const Volume3D ct = dct3(target_mean);
  for (std::int64_t w = 0; w < d.nz; ++w) {
    for (std::int64_t v = 0; v < d.ny; ++v) {
      for (std::int64_t u = 0; u < d.nx; ++u) {
        if (in_region(u, v, w)) cs(u, v, w) = ct(u, v, w);
      }
    }
  }
  Volume3D out = idct3(cs);
  if (src.has_mask()) out.set_mask(*src.mask());
  return out;
}

}  // namespace harmony
