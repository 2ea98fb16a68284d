#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "harmony/volume.hpp"

namespace harmony {

enum class RefineMetric { ncc, mi, none };

// per_voxel multiplies the similarity gradient by the number of voxels it is
// computed over, so step_size acts on the per-voxel scale regardless of
// volume size. raw applies step_size to the plain gradient.
enum class GradientScale { per_voxel, raw };

struct RefineConfig {
  RefineMetric metric = RefineMetric::ncc;
  double step_size = 0.02;
  // KDE gradients grow like 1/mi_sigma, so MI ascent takes a smaller step.
  double mi_step_size = 1e-3;
  std::int64_t iterations = 6;
  std::int64_t mi_bins = 256;
  double mi_sigma = 0.01;
  std::optional<Mask> mask;
  GradientScale gradient_scale = GradientScale::per_voxel;

  void validate() const;
};

// Sums run over mask voxels, or all voxels when mask is null.
double ncc(std::span<const double> a, std::span<const double> b, const Mask* mask = nullptr);
double ncc(const Volume3D& a, const Volume3D& b, const std::optional<Mask>& mask = std::nullopt);

// d ncc(x, src) / dx, zero outside the mask.
std::vector<double> grad_ncc(std::span<const double> x, std::span<const double> src, const Mask* mask = nullptr);
Volume3D grad_ncc(const Volume3D& x, const Volume3D& src, const std::optional<Mask>& mask = std::nullopt);

struct RefineResult {
  Volume3D volume;
  // Similarity before the first step followed by the value after each step.
  std::vector<double> trace;
};

RefineResult refine_ncc(const Volume3D& x_init, const Volume3D& src, const RefineConfig& cfg);

// Gaussian KDE over `bins` centres spaced uniformly on [0, 1]; sums to 1.
std::vector<double> kde_histogram(const Volume3D& v, std::int64_t bins, double sigma,
                                  const std::optional<Mask>& mask = std::nullopt);

// Mutual information (nats) of the joint KDE histogram J_kl = sum_i w_k(x_i) w_l(s_i).
double mutual_information(std::span<const double> x, std::span<const double> src, std::int64_t bins, double sigma,
                          const Mask* mask = nullptr);
double mutual_information(const Volume3D& x, const Volume3D& src, std::int64_t bins, double sigma,
                          const std::optional<Mask>& mask = std::nullopt);

// d MI / dx through the kernel weights of x; src is held fixed.
std::vector<double> grad_mi(std::span<const double> x, std::span<const double> src, std::int64_t bins, double sigma,
                            const Mask* mask = nullptr);

// Ascent on MI; x is clamped to [0, 1] after every step.
RefineResult refine_mi(const Volume3D& x_init, const Volume3D& src, const RefineConfig& cfg);

// Dispatches on cfg.metric; none returns x_init with an empty trace.
RefineResult refine(const Volume3D& x_init, const Volume3D& src, const RefineConfig& cfg);

}  // namespace harmony
