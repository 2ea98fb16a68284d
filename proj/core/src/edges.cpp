#include "harmony/edges.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "harmony/error.hpp"

namespace harmony {

namespace {

std::int64_t clamp_index(std::int64_t i, std::int64_t n) { return std::clamp<std::int64_t>(i, 0, n - 1); }

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

// Convolves along one axis with edge replication.
Volume3D convolve_axis(const Volume3D& v, const std::vector<double>& kernel, int axis) {
  const Dims& d = v.dims();
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::int64_t step = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
  const std::int64_t n = d[axis];
  Volume3D out(d, v.spacing());
  std::vector<double> line(static_cast<std::size_t>(n));
  for (std::int64_t z = 0; z < (axis == 2 ? 1 : d.nz); ++z) {
    for (std::int64_t y = 0; y < (axis == 1 ? 1 : d.ny); ++y) {
      for (std::int64_t x = 0; x < (axis == 0 ? 1 : d.nx); ++x) {
        const std::int64_t base = v.index(x, y, z);
        for (std::int64_t i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = v[base + i * step];
        for (std::int64_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int r = -radius; r <= radius; ++r) {
            acc += kernel[static_cast<std::size_t>(r + radius)] * line[static_cast<std::size_t>(clamp_index(i + r, n))];
          }
          out[base + i * step] = acc;
        }
      }
    }
  }
  return out;
}

// The 13 direction representatives of the 26-neighbourhood (one per +/- pair).
constexpr std::array<std::array<int, 3>, 13> kDirections = {{
    {1, 0, 0}, {0, 1, 0}, {0, 0, 1},
    {1, 1, 0}, {1, -1, 0}, {1, 0, 1}, {1, 0, -1}, {0, 1, 1}, {0, 1, -1},
    {1, 1, 1}, {1, 1, -1}, {1, -1, 1}, {1, -1, -1},
}};

// Smoothing, gradient and non-maximum suppression are independent of the
// thresholds, so they are computed once and reused across a sweep.
class CannyStages {
public:
  CannyStages(const Volume3D& v, const CannyConfig& cfg) : dims_(v.dims()) {
    const Volume3D smooth = cfg.smoothing_sigma > 0.0 ? gaussian_smooth(v, cfg.smoothing_sigma) : v;
    const Gradient g = gradient_3d(smooth);
    const std::int64_t n = dims_.total();
    magnitude_.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      magnitude_[static_cast<std::size_t>(i)] = std::sqrt(g.gx[i] * g.gx[i] + g.gy[i] * g.gy[i] + g.gz[i] * g.gz[i]);
    }
    max_magnitude_ = n ? *std::max_element(magnitude_.begin(), magnitude_.end()) : 0.0;

    if (cfg.mask) mask_ = &*cfg.mask;
    counted_ = mask_ ? count(*mask_) : n;

    for (std::int64_t z = 0; z < dims_.nz; ++z) {
      for (std::int64_t y = 0; y < dims_.ny; ++y) {
        for (std::int64_t x = 0; x < dims_.nx; ++x) {
          const std::int64_t i = v.index(x, y, z);
          const double m = magnitude_[static_cast<std::size_t>(i)];
          if (m <= 0.0) continue;
          if (mask_ && !(*mask_)[static_cast<std::size_t>(i)]) continue;
          const auto& dir = quantize(g.gx[i], g.gy[i], g.gz[i]);
          const double ahead = at(x + dir[0], y + dir[1], z + dir[2]);
          const double behind = at(x - dir[0], y - dir[1], z - dir[2]);
          // Ties along the direction keep exactly one voxel of a flat-topped ridge.
          if (m >= ahead && m > behind) candidates_.push_back(i);
        }
      }
    }
  }

  double max_magnitude() const { return max_magnitude_; }

  EdgeMap hysteresis(double high, double low) const {
    EdgeMap e;
    e.dims = dims_;
    e.bits.assign(static_cast<std::size_t>(dims_.total()), 0);
    e.threshold_used = high;
    std::vector<std::int64_t> stack;
    for (std::int64_t i : candidates_) {
      if (magnitude_[static_cast<std::size_t>(i)] >= high) {
        e.bits[static_cast<std::size_t>(i)] = 1;
        stack.push_back(i);
      }
    }
    // Weak voxels: NMS survivors at or above `low`.
    std::vector<std::uint8_t> weak(e.bits.size(), 0);
    for (std::int64_t i : candidates_) {
      if (magnitude_[static_cast<std::size_t>(i)] >= low) weak[static_cast<std::size_t>(i)] = 1;
    }
    const std::int64_t nxy = dims_.nx * dims_.ny;
    while (!stack.empty()) {
      const std::int64_t i = stack.back();
      stack.pop_back();
      const std::int64_t z = i / nxy;
      const std::int64_t y = (i % nxy) / dims_.nx;
      const std::int64_t x = i % dims_.nx;
      for (int dz = -1; dz <= 1; ++dz) {
        const std::int64_t zz = z + dz;
        if (zz < 0 || zz >= dims_.nz) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          const std::int64_t yy = y + dy;
          if (yy < 0 || yy >= dims_.ny) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const std::int64_t xx = x + dx;
            if (xx < 0 || xx >= dims_.nx) continue;
            const auto j = static_cast<std::size_t>(xx + dims_.nx * (yy + dims_.ny * zz));
            if (weak[j] && !e.bits[j]) {
              e.bits[j] = 1;
              stack.push_back(static_cast<std::int64_t>(j));
            }
          }
        }
      }
    }
    e.edge_fraction = counted_ > 0 ? static_cast<double>(e.popcount()) / static_cast<double>(counted_) : 0.0;
    return e;
  }

private:
  double at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    x = clamp_index(x, dims_.nx);
    y = clamp_index(y, dims_.ny);
    z = clamp_index(z, dims_.nz);
    return magnitude_[static_cast<std::size_t>(x + dims_.nx * (y + dims_.ny * z))];
  }

  static const std::array<int, 3>& quantize(double gx, double gy, double gz) {
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t k = 0; k < kDirections.size(); ++k) {
      const auto& d = kDirections[k];
      const double len = std::sqrt(static_cast<double>(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]));
      const double score = std::abs(gx * d[0] + gy * d[1] + gz * d[2]) / len;
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    return kDirections[best];
  }

  Dims dims_;
  std::vector<double> magnitude_;
  std::vector<std::int64_t> candidates_;
  double max_magnitude_ = 0.0;
  const Mask* mask_ = nullptr;
  std::int64_t counted_ = 0;
};

}  // namespace

void CannyConfig::validate() const {
  if (!(smoothing_sigma >= 0.0)) throw UsageError("smoothing_sigma must be >= 0");
  if (!(low_high_ratio > 0.0 && low_high_ratio < 1.0)) throw UsageError("low_high_ratio must lie in (0, 1)");
  if (!(target_fraction > 0.0 && target_fraction < 1.0)) throw UsageError("target_fraction must lie in (0, 1)");
  if (decrement_step && !(*decrement_step > 0.0)) throw UsageError("decrement_step must be > 0");
  if (max_iterations < 1) throw UsageError("max_iterations must be >= 1");
}

std::int64_t EdgeMap::popcount() const {
  return std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
}

Volume3D EdgeMap::to_volume(Spacing spacing) const {
  std::vector<double> data(bits.begin(), bits.end());
  return Volume3D(dims, spacing, std::move(data));
}

EdgeMap EdgeMap::from_volume(const Volume3D& v) {
  EdgeMap e;
  e.dims = v.dims();
  e.bits.resize(static_cast<std::size_t>(v.size()));
  for (std::int64_t i = 0; i < v.size(); ++i) e.bits[static_cast<std::size_t>(i)] = v[i] != 0.0 ? 1 : 0;
  e.edge_fraction = static_cast<double>(e.popcount()) / static_cast<double>(v.size());
  e.threshold_used = std::nan("");
  return e;
}

Volume3D gaussian_smooth(const Volume3D& v, double sigma) {
  if (!(sigma > 0.0)) return v;
  const auto kernel = gaussian_kernel(sigma);
  Volume3D out = convolve_axis(v, kernel, 0);
  out = convolve_axis(out, kernel, 1);
  out = convolve_axis(out, kernel, 2);
  if (v.has_mask()) out.set_mask(*v.mask());
  return out;
}

Gradient gradient_3d(const Volume3D& v) {
  const Dims& d = v.dims();
  if (d.nx < 3 || d.ny < 3 || d.nz < 3) throw ShapeError("gradient_3d requires at least 3 voxels per axis");
  Gradient g{Volume3D(d, v.spacing()), Volume3D(d, v.spacing()), Volume3D(d, v.spacing())};
  for (std::int64_t z = 0; z < d.nz; ++z) {
    for (std::int64_t y = 0; y < d.ny; ++y) {
      for (std::int64_t x = 0; x < d.nx; ++x) {
        const auto i = v.index(x, y, z);
        g.gx[i] = 0.5 * (v(clamp_index(x + 1, d.nx), y, z) - v(clamp_index(x - 1, d.nx), y, z));
        g.gy[i] = 0.5 * (v(x, clamp_index(y + 1, d.ny), z) - v(x, clamp_index(y - 1, d.ny), z));
        g.gz[i] = 0.5 * (v(x, y, clamp_index(z + 1, d.nz)) - v(x, y, clamp_index(z - 1, d.nz)));
      }
    }
  }
  return g;
}

EdgeMap canny_3d(const Volume3D& v, double high, const CannyConfig& cfg) {
  cfg.validate();
  if (!(high > 0.0)) throw UsageError("canny high threshold must be > 0");
  CannyStages stages(v, cfg);
  return stages.hysteresis(high, cfg.low_high_ratio * high);
}

EdgeMap adaptive_edge_detect(const Volume3D& v, const CannyConfig& cfg) {
  cfg.validate();
  CannyStages stages(v, cfg);
  const double start = stages.max_magnitude();
  if (!(start > 0.0)) throw ConvergenceError("volume has no gradient; edge target unreachable", 0.0);
  const double step = cfg.decrement_step.value_or(start / 256.0);
  double last = 0.0;
  for (int k = 0; k < cfg.max_iterations; ++k) {
    const double high = start - step * k;
    if (!(high > 0.0)) break;
    EdgeMap e = stages.hysteresis(high, cfg.low_high_ratio * high);
    last = e.edge_fraction;
    if (e.edge_fraction >= cfg.target_fraction) return e;
  }
  throw ConvergenceError("edge fraction target " + std::to_string(cfg.target_fraction) +
                             " not reached; last fraction " + std::to_string(last),
                         last);
}

double jaccard(const EdgeMap& a, const EdgeMap& b) {
  if (!(a.dims == b.dims)) throw ShapeError("edge maps differ in dims");
  std::int64_t inter = 0;
  std::int64_t uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void save_edge_map(const EdgeMap& e, const std::filesystem::path& path, Spacing spacing) {
  save_binary_volume(e.to_volume(spacing), path);
}

EdgeMap load_edge_map(const std::filesystem::path& path) { return EdgeMap::from_volume(load_volume(path)); }

}  // namespace harmony
