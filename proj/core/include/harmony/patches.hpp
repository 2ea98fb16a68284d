#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "harmony/edges.hpp"
#include "harmony/volume.hpp"

namespace harmony {

using Rng = std::mt19937_64;

// Three P^3 channels holding the normalised full-volume position of every
// sampled voxel along x, y and z, each in [-1, 1].
using CoordChannels = std::array<std::vector<double>, 3>;

// Cubic training sample. All tensors have P^3 entries in volume index order
// (x fastest). Without flips, tensor index m maps to full-volume voxel
// origin + stride * m.
struct TrainingPatch {
  std::int64_t size = 0;  // P
  std::vector<double> data;
  std::vector<double> edge;
  CoordChannels coords;
  Index3 origin{0, 0, 0};
  Index3 stride{1, 1, 1};
  std::array<bool, 3> flipped{false, false, false};
  bool multistride = false;  // drawn by the multi-stride path

  std::int64_t voxels() const { return size * size * size; }
};

struct PatchSamplerConfig {
  std::int64_t patch_size = 64;
  double multistride_ratio = 0.2;
  // Largest stride per axis; defaults to floor(dim / P) of each volume.
  std::optional<Index3> max_multiple;
  bool random_flips = true;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// value at index m along an axis = 2 * (origin + stride * m) / (dim - 1) - 1.
// A length-1 axis maps to 0.
CoordChannels coord_channels(const Dims& dims, const Index3& origin, const Index3& stride, std::int64_t patch_size);

// Normalised coordinate of voxel `index` on an axis with `dim` voxels.
double normalized_coordinate(std::int64_t index, std::int64_t dim);

// Extracts a strided cube without any interpolation.
TrainingPatch extract_patch(const Volume3D& v, const EdgeMap& e, const Index3& origin, const Index3& stride,
                            std::int64_t patch_size);

TrainingPatch sample_simple_patch(const Volume3D& v, const EdgeMap& e, const PatchSamplerConfig& cfg, Rng& rng);

// Crops an (n_a P, n_b P, n_c P) sub-volume with per-axis multiples drawn from
// 1..max_multiple and index-downsamples it (data and edges) to P^3.
TrainingPatch sample_multistride_patch(const Volume3D& v, const EdgeMap& e, const PatchSamplerConfig& cfg, Rng& rng);

// Mirrors the patch along `axis`: tensors are reversed and that coordinate
// channel is negated, i.e. the patch as sampled from the mirrored volume.
void flip_patch(TrainingPatch& p, int axis);

std::vector<TrainingPatch> sample_batch(std::span<const Volume3D> volumes, std::span<const EdgeMap> edges,
                                        const PatchSamplerConfig& cfg, Rng& rng, std::int64_t batch);

}  // namespace harmony
