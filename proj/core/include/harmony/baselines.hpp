#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "harmony/volume.hpp"

namespace harmony {

// Pooled empirical CDF on `bins` equal-width bins over [0, 1]: cdf[j] is the
// fraction of voxels at or below the upper edge (j + 1) / bins. Values
// outside [0, 1] count towards the end bins.
struct TargetHistogram {
  std::int64_t bins = 0;
  std::vector<double> cdf;

  // Piecewise-linear inverse through (0, 0) and ((j + 1) / bins, cdf[j]).
  double inverse(double u) const;
  // Piecewise-linear CDF evaluated at x.
  double evaluate(double x) const;
};

TargetHistogram build_target_histogram(std::span<const Volume3D> volumes, std::int64_t bins = 1024);

// out = hist.inverse(F_src(x)) with F_src the midrank empirical CDF of src.
Volume3D histogram_match(const Volume3D& src, const TargetHistogram& hist);

// Orthonormal DCT-II along each axis; coefficient (u, v, w) is stored at voxel (u, v, w).
Volume3D dct3(const Volume3D& v);
// Orthonormal DCT-III, the inverse of dct3.
Volume3D idct3(const Volume3D& c);

// Voxelwise mean of volumes sharing dims.
Volume3D mean_volume(std::span<const Volume3D> volumes);

// Replaces DCT coefficients with u/nx + v/ny + w/nz < cutoff by those of target_mean.
Volume3D ssimh(const Volume3D& src, const Volume3D& target_mean, double cutoff = 0.05);

}  // namespace harmony
