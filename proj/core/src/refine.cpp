#include "harmony/refine.hpp"

#include <algorithm>
#include <cmath>

#include "harmony/error.hpp"

namespace harmony {

void RefineConfig::validate() const {
  if (!(step_size > 0.0)) throw UsageError("refine step_size must be > 0");
  if (!(mi_step_size > 0.0)) throw UsageError("refine mi_step_size must be > 0");
  if (iterations < 0) throw UsageError("refine iterations must be >= 0");
  if (mi_bins < 2) throw UsageError("refine mi_bins must be >= 2");
  if (!(mi_sigma > 0.0)) throw UsageError("refine mi_sigma must be > 0");
}

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, const Mask* mask) {
  if (a.size() != b.size()) throw ShapeError("similarity inputs differ in size");
  if (mask && mask->size() != a.size()) throw ShapeError("mask size differs from the volume");
}

bool in_mask(const Mask* mask, std::size_t i) { return !mask || (*mask)[i]; }

struct Moments {
  double mean_a = 0.0;
  double mean_b = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  double sab = 0.0;
  std::int64_t n = 0;
};

Moments centred_moments(std::span<const double> a, std::span<const double> b, const Mask* mask) {
  check_pair(a, b, mask);
  Moments m;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!in_mask(mask, i)) continue;
    m.mean_a += a[i];
    m.mean_b += b[i];
    ++m.n;
  }
  if (m.n == 0) throw DegenerateInputError("similarity mask is empty");
  m.mean_a /= static_cast<double>(m.n);
  m.mean_b /= static_cast<double>(m.n);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!in_mask(mask, i)) continue;
    const double da = a[i] - m.mean_a;
    const double db = b[i] - m.mean_b;
    m.saa += da * da;
    m.sbb += db * db;
    m.sab += da * db;
  }
  // A constant input leaves only rounding noise in the centred sums.
  const double na = static_cast<double>(m.n);
  if (!(m.saa > 1e-24 * na * (m.mean_a * m.mean_a + 1e-300)) || !(m.sbb > 1e-24 * na * (m.mean_b * m.mean_b + 1e-300))) {
    throw DegenerateInputError("ncc: zero variance over the mask");
  }
  return m;
}

const Mask* mask_ptr(const std::optional<Mask>& mask) { return mask ? &*mask : nullptr; }

void check_dims(const Volume3D& a, const Volume3D& b) {
  if (!(a.dims() == b.dims())) throw ShapeError("similarity inputs differ in dims");
}

double step_scale(const RefineConfig& cfg, double step, std::span<const double> x, const Mask* mask) {
  if (cfg.gradient_scale == GradientScale::raw) return step;
  const auto n = mask ? count(*mask) : static_cast<std::int64_t>(x.size());
  return step * static_cast<double>(n);
}

// Gaussian kernel weights of one sample against the bin centres k / (bins - 1),
// truncated at 8 sigma.
class Kernel {
public:
  Kernel(std::int64_t bins, double sigma) : bins_(bins), sigma_(sigma), h_(1.0 / static_cast<double>(bins - 1)) {}

  std::int64_t bins() const { return bins_; }

  // Fills w (and dw = dw/dx when non-null) for the bins in [first, last].
  void eval(double x, std::int64_t& first, std::int64_t& last, std::vector<double>& w, std::vector<double>* dw) const {
    const double reach = 8.0 * sigma_;
    first = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil((x - reach) / h_)));
    last = std::min<std::int64_t>(bins_ - 1, static_cast<std::int64_t>(std::floor((x + reach) / h_)));
    w.clear();
    if (dw) dw->clear();
    const double inv = 1.0 / (2.0 * sigma_ * sigma_);
    for (std::int64_t k = first; k <= last; ++k) {
      const double d = x - static_cast<double>(k) * h_;
      const double e = std::exp(-d * d * inv);
      w.push_back(e);
      if (dw) dw->push_back(-d / (sigma_ * sigma_) * e);
    }
  }

private:
  std::int64_t bins_;
  double sigma_;
  double h_;
};

struct Joint {
  std::int64_t bins = 0;
  std::vector<double> p;  // bins x bins, row = x bin, column = src bin
  std::vector<double> px;
  std::vector<double> ps;
  double total = 0.0;
  double mi = 0.0;
};

Joint joint_histogram(std::span<const double> x, std::span<const double> src, const Kernel& kernel, const Mask* mask) {
  check_pair(x, src, mask);
  const std::int64_t bins = kernel.bins();
  Joint j;
  j.bins = bins;
  j.p.assign(static_cast<std::size_t>(bins * bins), 0.0);
  std::vector<double> wx;
  std::vector<double> ws;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!in_mask(mask, i)) continue;
    ++n;
    std::int64_t fx, lx, fs, ls;
    kernel.eval(x[i], fx, lx, wx, nullptr);
    kernel.eval(src[i], fs, ls, ws, nullptr);
    for (std::int64_t k = fx; k <= lx; ++k) {
      double* row = j.p.data() + k * bins;
      const double a = wx[static_cast<std::size_t>(k - fx)];
      for (std::int64_t l = fs; l <= ls; ++l) row[l] += a * ws[static_cast<std::size_t>(l - fs)];
    }
  }
  if (n == 0) throw DegenerateInputError("mutual information: mask is empty");
  for (double v : j.p) j.total += v;
  if (!(j.total > 0.0)) throw DegenerateInputError("mutual information: intensities fall outside the histogram range");
  j.px.assign(static_cast<std::size_t>(bins), 0.0);
  j.ps.assign(static_cast<std::size_t>(bins), 0.0);
  for (std::int64_t k = 0; k < bins; ++k) {
    for (std::int64_t l = 0; l < bins; ++l) {
      double& v = j.p[static_cast<std::size_t>(k * bins + l)];
      v /= j.total;
      j.px[static_cast<std::size_t>(k)] += v;
      j.ps[static_cast<std::size_t>(l)] += v;
    }
  }
  for (std::int64_t k = 0; k < bins; ++k) {
    for (std::int64_t l = 0; l < bins; ++l) {
      const double v = j.p[static_cast<std::size_t>(k * bins + l)];
      if (v > 0.0) j.mi += v * std::log(v / (j.px[static_cast<std::size_t>(k)] * j.ps[static_cast<std::size_t>(l)]));
    }
  }
  return j;
}

}  // namespace

double ncc(std::span<const double> a, std::span<const double> b, const Mask* mask) {
  const Moments m = centred_moments(a, b, mask);
  return std::clamp(m.sab / std::sqrt(m.saa * m.sbb), -1.0, 1.0);
}

double ncc(const Volume3D& a, const Volume3D& b, const std::optional<Mask>& mask) {
  check_dims(a, b);
  return ncc(a.values(), b.values(), mask_ptr(mask));
}

std::vector<double> grad_ncc(std::span<const double> x, std::span<const double> src, const Mask* mask) {
  const Moments m = centred_moments(x, src, mask);
  const double inv = 1.0 / std::sqrt(m.saa * m.sbb);
  const double ratio = m.sab / m.saa;
  std::vector<double> g(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!in_mask(mask, i)) continue;
    g[i] = ((src[i] - m.mean_b) - ratio * (x[i] - m.mean_a)) * inv;
  }
  return g;
}

Volume3D grad_ncc(const Volume3D& x, const Volume3D& src, const std::optional<Mask>& mask) {
  check_dims(x, src);
  return Volume3D(x.dims(), x.spacing(), grad_ncc(x.values(), src.values(), mask_ptr(mask)));
}

RefineResult refine_ncc(const Volume3D& x_init, const Volume3D& src, const RefineConfig& cfg) {
  cfg.validate();
  check_dims(x_init, src);
  const Mask* mask = mask_ptr(cfg.mask);
  RefineResult r{x_init, {}};
  auto x = r.volume.values();
  const double scale = step_scale(cfg, cfg.step_size, x, mask);
  r.trace.push_back(ncc(x, src.values(), mask));
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    const auto g = grad_ncc(x, src.values(), mask);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += scale * g[i];
    r.trace.push_back(ncc(x, src.values(), mask));
  }
  return r;
}

std::vector<double> kde_histogram(const Volume3D& v, std::int64_t bins, double sigma, const std::optional<Mask>& mask) {
  if (bins < 2) throw UsageError("kde_histogram: bins must be >= 2");
  if (!(sigma > 0.0)) throw UsageError("kde_histogram: sigma must be > 0");
  const Mask* m = mask_ptr(mask);
  if (m && m->size() != static_cast<std::size_t>(v.size())) throw ShapeError("mask size differs from the volume");
  const Kernel kernel(bins, sigma);
  std::vector<double> p(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> w;
  std::int64_t n = 0;
  const auto values = v.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!in_mask(m, i)) continue;
    ++n;
    std::int64_t first, last;
    kernel.eval(values[i], first, last, w, nullptr);
    for (std::int64_t k = first; k <= last; ++k) p[static_cast<std::size_t>(k)] += w[static_cast<std::size_t>(k - first)];
  }
  if (n == 0) throw DegenerateInputError("kde_histogram: mask is empty");
  double total = 0.0;
  for (double x : p) total += x;
  if (!(total > 0.0)) throw DegenerateInputError("kde_histogram: intensities fall outside [0, 1]");
  for (double& x : p) x /= total;
  return p;
}

double mutual_information(std::span<const double> x, std::span<const double> src, std::int64_t bins, double sigma,
                          const Mask* mask) {
  if (bins < 2 || !(sigma > 0.0)) throw UsageError("mutual information: bins must be >= 2 and sigma > 0");
  return joint_histogram(x, src, Kernel(bins, sigma), mask).mi;
}

double mutual_information(const Volume3D& x, const Volume3D& src, std::int64_t bins, double sigma,
                          const std::optional<Mask>& mask) {
  check_dims(x, src);
  return mutual_information(x.values(), src.values(), bins, sigma, mask_ptr(mask));
}

std::vector<double> grad_mi(std::span<const double> x, std::span<const double> src, std::int64_t bins, double sigma,
                            const Mask* mask) {
  if (bins < 2 || !(sigma > 0.0)) throw UsageError("mutual information: bins must be >= 2 and sigma > 0");
  const Kernel kernel(bins, sigma);
  const Joint j = joint_histogram(x, src, kernel, mask);
  // dMI/dJ_kl = (log P_kl - log p_k - log q_l - MI) / Z
  std::vector<double> g_joint(j.p.size(), 0.0);
  for (std::int64_t k = 0; k < bins; ++k) {
    for (std::int64_t l = 0; l < bins; ++l) {
      const auto idx = static_cast<std::size_t>(k * bins + l);
      const double p = j.p[idx];
      if (p > 0.0) {
        g_joint[idx] =
            (std::log(p / (j.px[static_cast<std::size_t>(k)] * j.ps[static_cast<std::size_t>(l)])) - j.mi) / j.total;
      }
    }
  }
  std::vector<double> g(x.size(), 0.0);
  std::vector<double> wx, dwx, ws;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!in_mask(mask, i)) continue;
    std::int64_t fx, lx, fs, ls;
    kernel.eval(x[i], fx, lx, wx, &dwx);
    kernel.eval(src[i], fs, ls, ws, nullptr);
    double acc = 0.0;
    for (std::int64_t k = fx; k <= lx; ++k) {
      const double* row = g_joint.data() + k * bins;
      double inner = 0.0;
      for (std::int64_t l = fs; l <= ls; ++l) inner += row[l] * ws[static_cast<std::size_t>(l - fs)];
      acc += dwx[static_cast<std::size_t>(k - fx)] * inner;
    }
    g[i] = acc;
  }
  return g;
}

RefineResult refine_mi(const Volume3D& x_init, const Volume3D& src, const RefineConfig& cfg) {
  cfg.validate();
  check_dims(x_init, src);
  const Mask* mask = mask_ptr(cfg.mask);
  RefineResult r{x_init, {}};
  auto x = r.volume.values();
  const double scale = step_scale(cfg, cfg.mi_step_size, x, mask);
  r.trace.push_back(mutual_information(x, src.values(), cfg.mi_bins, cfg.mi_sigma, mask));
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    const auto g = grad_mi(x, src.values(), cfg.mi_bins, cfg.mi_sigma, mask);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] + scale * g[i], 0.0, 1.0);
    r.trace.push_back(mutual_information(x, src.values(), cfg.mi_bins, cfg.mi_sigma, mask));
  }
  return r;
}

RefineResult refine(const Volume3D& x_init, const Volume3D& src, const RefineConfig& cfg) {
  switch (cfg.metric) {
    case RefineMetric::ncc:
      return refine_ncc(x_init, src, cfg);
    case RefineMetric::mi:
      return refine_mi(x_init, src, cfg);
    case RefineMetric::none:
      cfg.validate();
      check_dims(x_init, src);
      return {x_init, {}};
  }
  throw UsageError("unknown refine metric");
}

}  // namespace harmony
