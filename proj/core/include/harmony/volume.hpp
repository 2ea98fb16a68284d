#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace harmony {

struct Dims {
  std::int64_t nx = 1;
  std::int64_t ny = 1;
  std::int64_t nz = 1;

  std::int64_t total() const { return nx * ny * nz; }
  std::int64_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

// Millimetres per voxel. Stored at the precision of the on-disk header.
struct Spacing {
  float sx = 1.0f;
  float sy = 1.0f;
  float sz = 1.0f;

  float operator[](int axis) const { return axis == 0 ? sx : axis == 1 ? sy : sz; }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

using Index3 = std::array<std::int64_t, 3>;

// One byte per voxel, 0 or 1.
using Mask = std::vector<std::uint8_t>;

// Dense scalar 3D grid. Linear index = x + nx * (y + ny * z); x varies fastest.
class Volume3D {
public:
  Volume3D() = default;
  explicit Volume3D(Dims dims, Spacing spacing = {}, double fill = 0.0);
  Volume3D(Dims dims, Spacing spacing, std::vector<double> data, std::optional<Mask> mask = std::nullopt);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }

  std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  double operator()(std::int64_t x, std::int64_t y, std::int64_t z) const { return data_[index(x, y, z)]; }
  double& operator()(std::int64_t x, std::int64_t y, std::int64_t z) { return data_[index(x, y, z)]; }
  double operator[](std::int64_t i) const { return data_[i]; }
  double& operator[](std::int64_t i) { return data_[i]; }

  bool has_mask() const { return mask_.has_value(); }
  const std::optional<Mask>& mask() const { return mask_; }
  void set_mask(Mask mask);
  void clear_mask() { mask_.reset(); }

  double min() const;
  double max() const;

  // Throws DataError if any value is NaN or infinite.
  void check_finite() const;

  friend bool operator==(const Volume3D&, const Volume3D&) = default;

private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<double> data_ = std::vector<double>(1, 0.0);
  std::optional<Mask> mask_;
};

enum class VolumeFormat { raw_v1, nifti1 };

// Picks a format from the file extension (.nii -> nifti1, anything else raw-v1).
VolumeFormat format_from_path(const std::filesystem::path& path);

Volume3D load_volume(const std::filesystem::path& path, VolumeFormat format);
inline Volume3D load_volume(const std::filesystem::path& path) {
  return load_volume(path, format_from_path(path));
}

// Writes raw-v1. The payload is f32 when every value is exactly representable
// as a float and f64 otherwise, so load(save(v)) == v always holds.
void save_volume(const Volume3D& v, const std::filesystem::path& path);

// Writes a 0/1 volume with the binary-payload flag set (one byte per voxel).
void save_binary_volume(const Volume3D& v, const std::filesystem::path& path);

// Uncompressed single-file NIfTI-1 (.nii) reader for float32 and int16 data.
Volume3D load_nifti(const std::filesystem::path& path);

struct NormalizationRecord {
  double p_low = 0.0;
  double p_high = 1.0;
  std::array<double, 2> percentiles{1.0, 99.0};
};

// Linear-interpolated percentile (q in [0, 100]) of an unsorted sample.
double percentile(std::span<const double> values, double q);

struct Normalized {
  Volume3D volume;
  NormalizationRecord record;
};

// clamp((x - p_lo) / (p_hi - p_lo), 0, 1); percentiles taken over the mask when present.
Normalized normalize_percentile(const Volume3D& v, double lo = 1.0, double hi = 99.0);

// Inverse of the affine part of normalize_percentile (clamped tails are not recovered).
Volume3D denormalize(const Volume3D& v, const NormalizationRecord& record);

// out(i, j, k) = in(a*i, b*j, c*k); spacing is multiplied by the stride.
Volume3D index_downsample(const Volume3D& v, const Index3& stride);

// True where intensity > frac * max(v).
Mask threshold_mask(const Volume3D& v, double frac);

std::int64_t count(const Mask& mask);

}  // namespace harmony
