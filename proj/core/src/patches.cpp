#include "harmony/patches.hpp"

#include <algorithm>

#include "harmony/error.hpp"

namespace harmony {

namespace {

void check_fits(const Dims& d, std::int64_t p) {
  if (d.nx < p || d.ny < p || d.nz < p) throw ShapeError("volume is smaller than the patch size");
}

std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  if (lo == hi) return lo;
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

}  // namespace

void PatchSamplerConfig::validate() const {
  if (patch_size < 2) throw UsageError("patch_size must be >= 2");
  if (!(multistride_ratio >= 0.0 && multistride_ratio <= 1.0)) throw UsageError("multistride_ratio must lie in [0, 1]");
  if (max_multiple) {
    for (auto m : *max_multiple) {
      if (m < 1) throw UsageError("max_multiple components must be >= 1");
    }
  }
}

double normalized_coordinate(std::int64_t index, std::int64_t dim) {
  if (dim <= 1) return 0.0;
  return 2.0 * static_cast<double>(index) / static_cast<double>(dim - 1) - 1.0;
}

CoordChannels coord_channels(const Dims& dims, const Index3& origin, const Index3& stride, std::int64_t p) {
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || stride[a] < 1 || origin[a] + stride[a] * (p - 1) >= dims[a]) {
      throw ShapeError("patch exceeds volume bounds");
    }
  }
  CoordChannels c;
  for (auto& ch : c) ch.resize(static_cast<std::size_t>(p * p * p));
  std::size_t m = 0;
  for (std::int64_t k = 0; k < p; ++k) {
    const double cz = normalized_coordinate(origin[2] + stride[2] * k, dims.nz);
    for (std::int64_t j = 0; j < p; ++j) {
      const double cy = normalized_coordinate(origin[1] + stride[1] * j, dims.ny);
      for (std::int64_t i = 0; i < p; ++i, ++m) {
        c[0][m] = normalized_coordinate(origin[0] + stride[0] * i, dims.nx);
        c[1][m] = cy;
        c[2][m] = cz;
      }
    }
  }
  return c;
}

TrainingPatch extract_patch(const Volume3D& v, const EdgeMap& e, const Index3& origin, const Index3& stride,
                            std::int64_t p) {
  if (!(e.dims == v.dims())) throw ShapeError("edge map dims differ from volume dims");
  TrainingPatch out;
  out.size = p;
  out.origin = origin;
  out.stride = stride;
  out.coords = coord_channels(v.dims(), origin, stride, p);
  out.data.resize(static_cast<std::size_t>(p * p * p));
  out.edge.resize(out.data.size());
  std::size_t m = 0;
  for (std::int64_t k = 0; k < p; ++k) {
    for (std::int64_t j = 0; j < p; ++j) {
      for (std::int64_t i = 0; i < p; ++i, ++m) {
        const auto src = v.index(origin[0] + stride[0] * i, origin[1] + stride[1] * j, origin[2] + stride[2] * k);
        out.data[m] = v[src];
        out.edge[m] = e.bits[static_cast<std::size_t>(src)] ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

TrainingPatch sample_simple_patch(const Volume3D& v, const EdgeMap& e, const PatchSamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::int64_t p = cfg.patch_size;
  check_fits(v.dims(), p);
  Index3 origin{};
  for (int a = 0; a < 3; ++a) origin[a] = uniform_int(rng, 0, v.dims()[a] - p);
  return extract_patch(v, e, origin, {1, 1, 1}, p);
}

TrainingPatch sample_multistride_patch(const Volume3D& v, const EdgeMap& e, const PatchSamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::int64_t p = cfg.patch_size;
  check_fits(v.dims(), p);
  Index3 stride{};
  for (int a = 0; a < 3; ++a) {
    const std::int64_t limit = v.dims()[a] / p;
    const std::int64_t cap = cfg.max_multiple ? std::min((*cfg.max_multiple)[a], limit) : limit;
    stride[a] = uniform_int(rng, 1, cap);
  }
  Index3 origin{};
  for (int a = 0; a < 3; ++a) origin[a] = uniform_int(rng, 0, v.dims()[a] - stride[a] * p);
  auto patch = extract_patch(v, e, origin, stride, p);
  patch.multistride = true;
  return patch;
}

void flip_patch(TrainingPatch& p, int axis) {
  const std::int64_t n = p.size;
  auto flip = [&](std::vector<double>& t) {
    for (std::int64_t k = 0; k < n; ++k) {
      for (std::int64_t j = 0; j < n; ++j) {
        for (std::int64_t i = 0; i < n; ++i) {
          std::int64_t a[3] = {i, j, k};
          if (a[axis] >= n - 1 - a[axis]) continue;
          std::int64_t b[3] = {i, j, k};
          b[axis] = n - 1 - a[axis];
          std::swap(t[static_cast<std::size_t>(a[0] + n * (a[1] + n * a[2]))],
                    t[static_cast<std::size_t>(b[0] + n * (b[1] + n * b[2]))]);
        }
      }
    }
  };
  flip(p.data);
  flip(p.edge);
  for (auto& c : p.coords) flip(c);
  for (double& c : p.coords[static_cast<std::size_t>(axis)]) c = -c;
  p.flipped[static_cast<std::size_t>(axis)] = !p.flipped[static_cast<std::size_t>(axis)];
}

std::vector<TrainingPatch> sample_batch(std::span<const Volume3D> volumes, std::span<const EdgeMap> edges,
                                        const PatchSamplerConfig& cfg, Rng& rng, std::int64_t batch) {
  cfg.validate();
  if (volumes.empty()) throw UsageError("sample_batch needs at least one volume");
  if (volumes.size() != edges.size()) throw UsageError("volume and edge lists differ in length");
  if (batch < 1) throw UsageError("batch must be >= 1");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TrainingPatch> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto which = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(volumes.size()) - 1));
    const bool multi = unit(rng) < cfg.multistride_ratio;
    auto patch = multi ? sample_multistride_patch(volumes[which], edges[which], cfg, rng)
                       : sample_simple_patch(volumes[which], edges[which], cfg, rng);
    if (cfg.random_flips) {
      for (int a = 0; a < 3; ++a) {
        if (unit(rng) < 0.5) flip_patch(patch, a);
      }
    }
    out.push_back(std::move(patch));
  }
  return out;
}

}  // namespace harmony
