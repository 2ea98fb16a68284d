#pragma once

// Building blocks of the velocity field with hand-written backward passes.
// Backward functions accumulate (+=) into parameter gradients and return the
// gradient with respect to the layer input.

#include <span>

#include "harmony/tensor.hpp"

namespace harmony::nn {

enum class Padding { zero, periodic };

struct ConvShape {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 3;  // odd; "same" output size
  Padding padding = Padding::zero;

  std::int64_t weight_count() const { return out_channels * in_channels * kernel * kernel * kernel; }
  std::int64_t parameter_count() const { return weight_count() + out_channels; }
};

// weight is (out, in, kz, ky, kx) row-major; bias has out entries.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& in, const ConvShape& shape, std::span<const T> weight, std::span<const T> bias);

template <typename T>
Tensor<T> conv3d_backward(const Tensor<T>& in, const Tensor<T>& grad_out, const ConvShape& shape,
                          std::span<const T> weight, std::span<T> grad_weight, std::span<T> grad_bias);

// Per-voxel RMS over channels with a learned per-channel gain.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& in, std::span<const T> gain);

template <typename T>
Tensor<T> rms_norm_backward(const Tensor<T>& in, const Tensor<T>& grad_out, std::span<const T> gain,
                            std::span<T> grad_gain);

// y = x * (1 + scale[c]) + shift[c]
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& in, std::span<const T> scale, std::span<const T> shift);

template <typename T>
Tensor<T> scale_shift_backward(const Tensor<T>& in, const Tensor<T>& grad_out, std::span<const T> scale,
                               std::span<T> grad_scale, std::span<T> grad_shift);

template <typename T>
Tensor<T> silu(const Tensor<T>& in);

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& in, const Tensor<T>& grad_out);

// Moves each 2x2x2 block into channels: (C, X, Y, Z) -> (8C, X/2, Y/2, Z/2).
template <typename T>
Tensor<T> space_to_channel(const Tensor<T>& in);

template <typename T>
Tensor<T> channel_to_space(const Tensor<T>& in);

// Nearest-neighbour x2 upsampling and its adjoint (sum over children).
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& in);

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void split_channels(const Tensor<T>& grad, Tensor<T>& grad_a, Tensor<T>& grad_b, std::int64_t channels_a);

}  // namespace harmony::nn
