#include "harmony/metrics.hpp"

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "harmony/error.hpp"
#include "harmony/io.hpp"

namespace harmony {

namespace {

void check_dims(const Volume3D& a, const Volume3D& b) {
  if (!(a.dims() == b.dims())) throw ShapeError("metric inputs differ in dims");
}

void check_mask(const std::optional<Mask>& mask, const Volume3D& v) {
  if (mask && mask->size() != static_cast<std::size_t>(v.size())) throw ShapeError("mask size differs from the volume");
}

// Valid-mode separable correlation with a normalised 1D Gaussian.
std::vector<double> filter_valid(std::vector<double> data, Dims d, const std::vector<double>& w) {
  const auto r = static_cast<std::int64_t>(w.size()) - 1;
  for (int axis = 0; axis < 3; ++axis) {
    Dims o = d;
    if (axis == 0) o.nx -= r;
    if (axis == 1) o.ny -= r;
    if (axis == 2) o.nz -= r;
    std::vector<double> out(static_cast<std::size_t>(o.total()), 0.0);
    const std::int64_t step = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
    std::size_t m = 0;
    for (std::int64_t z = 0; z < o.nz; ++z) {
      for (std::int64_t y = 0; y < o.ny; ++y) {
        for (std::int64_t x = 0; x < o.nx; ++x, ++m) {
          const std::int64_t base = x + d.nx * (y + d.ny * z);
          double acc = 0.0;
          for (std::size_t k = 0; k < w.size(); ++k) {
            acc += w[k] * data[static_cast<std::size_t>(base + static_cast<std::int64_t>(k) * step)];
          }
          out[m] = acc;
        }
      }
    }
    data = std::move(out);
    d = o;
  }
  return data;
}

}  // namespace

double psnr(const Volume3D& a, const Volume3D& b, const std::optional<Mask>& mask, double peak) {
  check_dims(a, b);
  check_mask(mask, a);
  if (!(peak > 0.0)) throw UsageError("psnr peak must be > 0");
  const auto x = a.values();
  const auto y = b.values();
  double acc = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    const double d = x[i] - y[i];
    acc += d * d;
    ++n;
  }
  if (n == 0) throw DegenerateInputError("psnr: mask is empty");
  const double mse = acc / static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

void SsimConfig::validate() const {
  if (window < 1 || window % 2 == 0) throw UsageError("ssim window must be a positive odd number");
  if (!(sigma > 0.0)) throw UsageError("ssim sigma must be > 0");
  if (!(k1 > 0.0 && k2 > 0.0)) throw UsageError("ssim constants must be > 0");
  if (!(data_range > 0.0)) throw UsageError("ssim data_range must be > 0");
}

double ssim3d(const Volume3D& a, const Volume3D& b, const std::optional<Mask>& mask, const SsimConfig& cfg) {
  cfg.validate();
  check_dims(a, b);
  check_mask(mask, a);
  const Dims d = a.dims();
  if (d.nx < cfg.window || d.ny < cfg.window || d.nz < cfg.window) {
    throw ShapeError("ssim window is larger than the volume");
  }
  std::vector<double> w(static_cast<std::size_t>(cfg.window));
  const std::int64_t r = cfg.window / 2;
  double wsum = 0.0;
  for (std::int64_t k = 0; k < cfg.window; ++k) {
    const double t = static_cast<double>(k - r);
    w[static_cast<std::size_t>(k)] = std::exp(-t * t / (2.0 * cfg.sigma * cfg.sigma));
    wsum += w[static_cast<std::size_t>(k)];
  }
  for (double& x : w) x /= wsum;

  const auto x = a.values();
  const auto y = b.values();
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid({x.begin(), x.end()}, d, w);
  const auto my = filter_valid({y.begin(), y.end()}, d, w);
  const auto mxx = filter_valid(std::move(xx), d, w);
  const auto myy = filter_valid(std::move(yy), d, w);
  const auto mxy = filter_valid(std::move(xy), d, w);

  const double c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
  const double c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);
  const Dims o{d.nx - 2 * r, d.ny - 2 * r, d.nz - 2 * r};
  double acc = 0.0;
  std::int64_t n = 0;
  std::size_t m = 0;
  for (std::int64_t z = 0; z < o.nz; ++z) {
    for (std::int64_t yv = 0; yv < o.ny; ++yv) {
      for (std::int64_t xv = 0; xv < o.nx; ++xv, ++m) {
        if (mask && !(*mask)[static_cast<std::size_t>(a.index(xv + r, yv + r, z + r))]) continue;
        const double ux = mx[m];
        const double uy = my[m];
        const double vx = mxx[m] - ux * ux;
        const double vy = myy[m] - uy * uy;
        const double cxy = mxy[m] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        ++n;
      }
    }
  }
  if (n == 0) throw DegenerateInputError("ssim: no window centre lies inside the mask");
  return acc / static_cast<double>(n);
}

double dice(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw ShapeError("dice inputs differ in size");
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    inter += (a[i] != 0) && (b[i] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace {

Mask label_mask(const Volume3D& seg, std::int64_t label) {
  Mask m(static_cast<std::size_t>(seg.size()));
  const auto v = seg.values();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::llround(v[i]) == label;
  return m;
}

}  // namespace

double dice(const Volume3D& seg_a, const Volume3D& seg_b, std::int64_t label) {
  check_dims(seg_a, seg_b);
  return dice(label_mask(seg_a, label), label_mask(seg_b, label));
}

std::map<std::int64_t, double> dice_per_label(const Volume3D& seg_a, const Volume3D& seg_b) {
  check_dims(seg_a, seg_b);
  std::set<std::int64_t> labels;
  for (double v : seg_a.values()) labels.insert(std::llround(v));
  for (double v : seg_b.values()) labels.insert(std::llround(v));
  labels.erase(0);
  std::map<std::int64_t, double> out;
  for (auto l : labels) out[l] = dice(seg_a, seg_b, l);
  return out;
}

double mae(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ShapeError("mae inputs differ in length");
  if (pred.empty()) throw DegenerateInputError("mae needs at least one value");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
  return acc / static_cast<double>(pred.size());
}

void MetricsConfig::validate() const {
  if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) throw UsageError("metrics mask_fraction must lie in (0, 1)");
  if (!(peak > 0.0)) throw UsageError("metrics peak must be > 0");
  ssim.validate();
}

MetricsReport evaluate(const Volume3D& pred, const Volume3D& truth, const MetricsConfig& cfg) {
  cfg.validate();
  check_dims(pred, truth);
  std::optional<Mask> mask;
  if (cfg.mask) {
    mask = cfg.mask;
  } else if (cfg.use_mask) {
    mask = threshold_mask(truth, cfg.mask_fraction);
  }
  MetricsReport r;
  r.mask_voxels = mask ? count(*mask) : pred.size();
  r.psnr = psnr(pred, truth, mask, cfg.peak);
  r.psnr_infinite = std::isinf(r.psnr);
  r.ssim = ssim3d(pred, truth, mask, cfg.ssim);
  return r;
}

void write_metrics_csv(std::span<const MetricsRow> rows, const std::filesystem::path& path) {
  std::set<std::int64_t> labels;
  for (const auto& row : rows) {
    if (row.report.dice) {
      for (const auto& [l, _] : *row.report.dice) labels.insert(l);
    }
  }
  std::ostringstream out;
  out.precision(17);
  out << "name,psnr,ssim,mask_voxels,mae";
  for (auto l : labels) out << ",dice_" << l;
  out << '\n';
  for (const auto& row : rows) {
    const auto& r = row.report;
    out << row.name << ',';
    if (r.psnr_infinite) {
      out << "inf";
    } else {
      out << r.psnr;
    }
    out << ',' << r.ssim << ',' << r.mask_voxels << ',';
    if (r.mae) out << *r.mae;
    for (auto l : labels) {
      out << ',';
      if (r.dice && r.dice->count(l)) out << r.dice->at(l);
    }
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace harmony
