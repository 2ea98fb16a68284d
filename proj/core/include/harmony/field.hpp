#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "harmony/layers.hpp"
#include "harmony/patches.hpp"
#include "harmony/tensor.hpp"

namespace harmony {

// Shape of the conditional velocity network: a 3D conv encoder-decoder with
// one resolution level per multiplier. Each level runs a block of two
// convolutions with RMS normalisation and SiLU plus a 1x1 residual
// projection of the block input; the time embedding modulates every block by
// a learned per-channel scale and shift. Downsampling moves
// 2x2x2 blocks into channels, upsampling is nearest-neighbour followed by a
// convolution, and encoder features are concatenated into the decoder.
struct Architecture {
  std::int64_t in_channels = 5;  // x_t, edge, three coordinate channels
  std::int64_t base_width = 16;
  std::vector<std::int64_t> multipliers{1, 2};
  std::int64_t kernel = 3;
  std::int64_t time_dim = 16;
  nn::Padding padding = nn::Padding::zero;

  std::int64_t levels() const { return static_cast<std::int64_t>(multipliers.size()); }
  std::int64_t width(std::int64_t level) const { return base_width * multipliers[static_cast<std::size_t>(level)]; }
  // Spatial dims of the input must be divisible by this.
  std::int64_t spatial_multiple() const { return std::int64_t{1} << (levels() - 1); }
  std::int64_t parameter_count() const;
  void validate() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Assembles the five input channels.
template <typename T>
Tensor<T> make_field_input(std::span<const double> x_t, std::span<const double> edge, const CoordChannels& coords,
                           const Dims& dims);

template <typename T>
struct FieldGradients {
  std::vector<T> values;  // aligned with the parameter vector
};

template <typename T>
struct FieldTape;  // activations recorded by a training forward pass

template <typename T>
class VelocityField {
public:
  explicit VelocityField(Architecture arch);
  VelocityField(Architecture arch, std::vector<T> params);
  VelocityField(const VelocityField&);
  VelocityField(VelocityField&&) noexcept;
  VelocityField& operator=(const VelocityField&);
  VelocityField& operator=(VelocityField&&) noexcept;
  ~VelocityField();

  const Architecture& architecture() const { return arch_; }
  std::span<const T> params() const { return params_; }
  std::span<T> params() { return params_; }
  std::int64_t parameter_count() const { return static_cast<std::int64_t>(params_.size()); }

  // One output channel with the input's spatial shape.
  Tensor<T> forward(const Tensor<T>& input, double t) const;

  // Forward pass that records what backward() needs.
  Tensor<T> forward(const Tensor<T>& input, double t, FieldTape<T>& tape) const;

  // Accumulates d(loss)/d(params) given d(loss)/d(output) into `grads`.
  void backward(const FieldTape<T>& tape, const Tensor<T>& grad_output, FieldGradients<T>& grads) const;

  FieldGradients<T> zero_gradients() const { return {std::vector<T>(params_.size(), T(0))}; }

  struct Layout;

private:
  Tensor<T> run(const Tensor<T>& input, double t, typename FieldTape<T>::Storage* storage) const;

  Architecture arch_;
  std::vector<T> params_;
  std::unique_ptr<Layout> layout_;
};

template <typename T>
struct FieldTape {
  FieldTape();
  ~FieldTape();
  FieldTape(FieldTape&&) noexcept;
  FieldTape& operator=(FieldTape&&) noexcept;

  struct Storage;
  std::unique_ptr<Storage> storage;
};

// Fan-in scaled uniform weights, unit norm gains, zero biases; the output
// convolution is zero so the initial velocity is identically zero.
template <typename T>
std::vector<T> init_params(const Architecture& arch, Rng& rng);

// Versioned binary checkpoint: architecture descriptor followed by f32 parameters.
void save_checkpoint(const VelocityField<float>& field, const std::filesystem::path& path);
VelocityField<float> load_checkpoint(const std::filesystem::path& path);
// Rejects checkpoints whose descriptor differs from `expected`.
VelocityField<float> load_checkpoint(const std::filesystem::path& path, const Architecture& expected);

extern template class VelocityField<float>;
extern template class VelocityField<double>;

}  // namespace harmony
