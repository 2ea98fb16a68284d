#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "harmony/error.hpp"
#include "harmony/volume.hpp"

namespace harmony {

// Channel-major activation tensor: element (c, x, y, z) lives at
// c * V + x + nx * (y + ny * z), V = nx * ny * nz.
template <typename T>
class Tensor {
public:
  Tensor() = default;
  Tensor(std::int64_t channels, Dims dims, T fill = T(0))
      : channels_(channels), dims_(dims), data_(static_cast<std::size_t>(channels * dims.total()), fill) {}

  std::int64_t channels() const { return channels_; }
  const Dims& dims() const { return dims_; }
  std::int64_t voxels() const { return dims_.total(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::span<T> channel(std::int64_t c) { return {data_.data() + c * voxels(), static_cast<std::size_t>(voxels())}; }
  std::span<const T> channel(std::int64_t c) const {
    return {data_.data() + c * voxels(), static_cast<std::size_t>(voxels())};
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return channels_ == other.channels_ && dims_ == other.dims_; }

private:
  std::int64_t channels_ = 0;
  Dims dims_{};
  std::vector<T> data_;
};

}  // namespace harmony
