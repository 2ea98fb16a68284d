#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "harmony/volume.hpp"

namespace harmony {

// 10 log10(peak^2 / MSE) over the mask; +infinity when MSE is 0.
double psnr(const Volume3D& a, const Volume3D& b, const std::optional<Mask>& mask = std::nullopt, double peak = 1.0);

struct SsimConfig {
  std::int64_t window = 7;  // odd edge length of the cubic window
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;

  void validate() const;
};

// Gaussian-windowed SSIM evaluated at every centre whose window lies inside
// the volume, averaged over centres inside the mask.
double ssim3d(const Volume3D& a, const Volume3D& b, const std::optional<Mask>& mask = std::nullopt,
              const SsimConfig& cfg = {});

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const Mask& a, const Mask& b);
// Dice of the voxels equal to `label` in two label volumes.
double dice(const Volume3D& seg_a, const Volume3D& seg_b, std::int64_t label);
// Dice for every nonzero label present in either volume.
std::map<std::int64_t, double> dice_per_label(const Volume3D& seg_a, const Volume3D& seg_b);

double mae(std::span<const double> pred, std::span<const double> truth);

struct MetricsConfig {
  // Metrics are computed inside threshold_mask(truth, mask_fraction) unless
  // use_mask is false or an explicit mask is given.
  bool use_mask = true;
  double mask_fraction = 0.1;
  std::optional<Mask> mask;
  SsimConfig ssim;
  double peak = 1.0;

  void validate() const;
};

struct MetricsReport {
  double psnr = 0.0;
  bool psnr_infinite = false;
  double ssim = 0.0;
  std::optional<std::map<std::int64_t, double>> dice;
  std::optional<double> mae;
  std::int64_t mask_voxels = 0;
};

MetricsReport evaluate(const Volume3D& pred, const Volume3D& truth, const MetricsConfig& cfg = {});

struct MetricsRow {
  std::string name;
  MetricsReport report;
};

// Columns: name,psnr,ssim,mask_voxels,mae,dice_<label>... ; infinite PSNR is written as inf.
void write_metrics_csv(std::span<const MetricsRow> rows, const std::filesystem::path& path);

}  // namespace harmony
