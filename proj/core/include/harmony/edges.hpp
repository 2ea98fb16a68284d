#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "harmony/volume.hpp"

namespace harmony {

struct CannyConfig {
  double smoothing_sigma = 1.0;    // voxels; 0 disables smoothing
  double low_high_ratio = 0.4;     // low threshold = ratio * high threshold
  double target_fraction = 0.08;   // edge voxels / counted voxels
  // Absolute decrement of the high threshold. When unset the sweep uses
  // 1/256 of the starting threshold.
  std::optional<double> decrement_step;
  int max_iterations = 256;
  // When set, edges are restricted to the mask and the fraction is counted
  // over mask voxels instead of the whole field of view.
  std::optional<Mask> mask;

  void validate() const;
};

// Binary edge volume. edge_fraction is popcount(bits) divided by the number of
// counted voxels (all voxels, or the mask voxels when a mask was used).
struct EdgeMap {
  Dims dims;
  std::vector<std::uint8_t> bits;
  double edge_fraction = 0.0;
  double threshold_used = 0.0;

  std::int64_t popcount() const;
  Volume3D to_volume(Spacing spacing = {}) const;
  static EdgeMap from_volume(const Volume3D& v);

  friend bool operator==(const EdgeMap&, const EdgeMap&) = default;
};

struct Gradient {
  Volume3D gx;
  Volume3D gy;
  Volume3D gz;
};

// Separable Gaussian smoothing with edge replication, kernel radius ceil(3 sigma).
Volume3D gaussian_smooth(const Volume3D& v, double sigma);

// Central differences per axis, boundary voxels replicated. Requires every dim >= 3.
Gradient gradient_3d(const Volume3D& v);

// Gaussian smoothing, gradient magnitude, non-maximum suppression along the
// gradient direction quantised to the 13 axes of the 26-neighbourhood, then
// double-threshold hysteresis with 26-connectivity.
EdgeMap canny_3d(const Volume3D& v, double high, const CannyConfig& cfg);

// Sweeps the high threshold downward from the maximum gradient magnitude and
// returns the first edge map whose fraction reaches cfg.target_fraction.
// Throws ConvergenceError (carrying the last fraction) if the sweep runs out.
EdgeMap adaptive_edge_detect(const Volume3D& v, const CannyConfig& cfg);

// Intersection over union of the edge voxel sets.
double jaccard(const EdgeMap& a, const EdgeMap& b);

void save_edge_map(const EdgeMap& e, const std::filesystem::path& path, Spacing spacing = {});
EdgeMap load_edge_map(const std::filesystem::path& path);

}  // namespace harmony
