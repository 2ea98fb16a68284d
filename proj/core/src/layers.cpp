#include "harmony/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace harmony::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Target number of voxel columns per im2col chunk.
constexpr std::int64_t kChunkVoxels = 8192;

// Source index along one axis for every (offset, position) pair; -1 marks a
// zero-padded read.
std::vector<std::int64_t> axis_lookup(std::int64_t n, std::int64_t k, Padding padding) {
  const std::int64_t r = k / 2;
  std::vector<std::int64_t> lut(static_cast<std::size_t>(k * n));
  for (std::int64_t o = 0; o < k; ++o) {
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t s = i + o - r;
      if (padding == Padding::periodic) {
        s = ((s % n) + n) % n;
      } else if (s < 0 || s >= n) {
        s = -1;
      }
      lut[static_cast<std::size_t>(o * n + i)] = s;
    }
  }
  return lut;
}

struct Geometry {
  Dims dims;
  std::int64_t k;
  std::vector<std::int64_t> lx, ly, lz;
  std::int64_t planes_per_chunk;

  Geometry(const Dims& d, const ConvShape& s)
      : dims(d),
        k(s.kernel),
        lx(axis_lookup(d.nx, s.kernel, s.padding)),
        ly(axis_lookup(d.ny, s.kernel, s.padding)),
        lz(axis_lookup(d.nz, s.kernel, s.padding)),
        planes_per_chunk(std::max<std::int64_t>(1, kChunkVoxels / (d.nx * d.ny))) {}
};

// Per-thread im2col buffer, kept between calls so that repeated convolutions
// do not fault in fresh pages.
template <typename T>
std::vector<T>& workspace() {
  thread_local std::vector<T> buffer;
  return buffer;
}

template <typename T>
using ColMap = Eigen::Map<RowMat<T>>;

// Returns a (C * k^3) x (planes * nx * ny) view for output planes [z0, z1),
// valid until the next call on this thread.
template <typename T>
ColMap<T> im2col(const Tensor<T>& in, const Geometry& g, Padding padding, std::int64_t z0, std::int64_t z1) {
  const auto& d = g.dims;
  const std::int64_t plane = d.nx * d.ny;
  const std::int64_t cols = (z1 - z0) * plane;
  const std::int64_t k = g.k;
  const std::int64_t r = k / 2;
  const std::int64_t rows_total = in.channels() * k * k * k;
  auto& buffer = workspace<T>();
  if (buffer.size() < static_cast<std::size_t>(rows_total * cols)) buffer.resize(static_cast<std::size_t>(rows_total * cols));
  ColMap<T> col(buffer.data(), rows_total, cols);
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < in.channels(); ++c) {
    const T* src = in.data() + c * in.voxels();
    for (std::int64_t oz = 0; oz < k; ++oz) {
      for (std::int64_t oy = 0; oy < k; ++oy) {
        for (std::int64_t ox = 0; ox < k; ++ox, ++row) {
          T* dst = col.data() + row * cols;
          const std::int64_t* lx = g.lx.data() + ox * d.nx;
          // Output x in [xs, xe) reads the contiguous input run starting at xs + ox - r.
          const std::int64_t xs = std::clamp<std::int64_t>(r - ox, 0, d.nx);
          const std::int64_t xe = std::clamp<std::int64_t>(d.nx + r - ox, xs, d.nx);
          for (std::int64_t z = z0; z < z1; ++z) {
            const std::int64_t sz = g.lz[static_cast<std::size_t>(oz * d.nz + z)];
            for (std::int64_t y = 0; y < d.ny; ++y) {
              const std::int64_t sy = g.ly[static_cast<std::size_t>(oy * d.ny + y)];
              T* out = dst + (z - z0) * plane + y * d.nx;
              if (sz < 0 || sy < 0) {
                std::fill(out, out + d.nx, T(0));
                continue;
              }
              const T* line = src + sz * plane + sy * d.nx;
              if (padding == Padding::zero) {
                std::fill(out, out + xs, T(0));
                std::copy(line + xs + ox - r, line + xe + ox - r, out + xs);
                std::fill(out + xe, out + d.nx, T(0));
              } else {
                for (std::int64_t x = 0; x < d.nx; ++x) out[x] = line[lx[x]];
              }
            }
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
void check_conv(const Tensor<T>& in, const ConvShape& s, std::size_t weights, std::size_t biases) {
  if (in.channels() != s.in_channels) throw ShapeError("conv3d: input channel mismatch");
  if (s.kernel < 1 || s.kernel % 2 == 0) throw ShapeError("conv3d: kernel must be odd");
  if (weights != static_cast<std::size_t>(s.weight_count()) || biases != static_cast<std::size_t>(s.out_channels)) {
    throw ShapeError("conv3d: parameter span size mismatch");
  }
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& in, const ConvShape& s, std::span<const T> weight, std::span<const T> bias) {
  check_conv(in, s, weight.size(), bias.size());
  const std::int64_t v = in.voxels();
  Tensor<T> out(s.out_channels, in.dims());
  Eigen::Map<const RowMat<T>> w(weight.data(), s.out_channels, s.in_channels * s.kernel * s.kernel * s.kernel);
  if (s.kernel == 1) {
    Eigen::Map<const RowMat<T>> x(in.data(), s.in_channels, v);
    Eigen::Map<RowMat<T>> y(out.data(), s.out_channels, v);
    y.noalias() = w * x;
  } else {
    const Geometry g(in.dims(), s);
    const std::int64_t plane = in.dims().nx * in.dims().ny;
    for (std::int64_t z0 = 0; z0 < in.dims().nz; z0 += g.planes_per_chunk) {
      const std::int64_t z1 = std::min(in.dims().nz, z0 + g.planes_per_chunk);
      const auto col = im2col(in, g, s.padding, z0, z1);
      StridedMap<T> y(out.data() + z0 * plane, s.out_channels, (z1 - z0) * plane, Eigen::OuterStride<>(v));
      y.noalias() = w * col;
    }
  }
  for (std::int64_t c = 0; c < s.out_channels; ++c) {
    auto ch = out.channel(c);
    const T b = bias[static_cast<std::size_t>(c)];
    for (T& x : ch) x += b;
  }
  return out;
}

template <typename T>
Tensor<T> conv3d_backward(const Tensor<T>& in, const Tensor<T>& grad_out, const ConvShape& s,
                          std::span<const T> weight, std::span<T> grad_weight, std::span<T> grad_bias) {
  check_conv(in, s, weight.size(), grad_bias.size());
  const std::int64_t v = in.voxels();
  const std::int64_t rows = s.in_channels * s.kernel * s.kernel * s.kernel;
  Eigen::Map<const RowMat<T>> w(weight.data(), s.out_channels, rows);
  Eigen::Map<RowMat<T>> gw(grad_weight.data(), s.out_channels, rows);
  for (std::int64_t c = 0; c < s.out_channels; ++c) {
    T acc = 0;
    for (T x : grad_out.channel(c)) acc += x;
    grad_bias[static_cast<std::size_t>(c)] += acc;
  }
  Tensor<T> grad_in(s.in_channels, in.dims());
  if (s.kernel == 1) {
    Eigen::Map<const RowMat<T>> x(in.data(), s.in_channels, v);
    Eigen::Map<const RowMat<T>> dy(grad_out.data(), s.out_channels, v);
    Eigen::Map<RowMat<T>> dx(grad_in.data(), s.in_channels, v);
    gw.noalias() += dy * x.transpose();
    dx.noalias() = w.transpose() * dy;
    return grad_in;
  }
  const Geometry g(in.dims(), s);
  const std::int64_t plane = in.dims().nx * in.dims().ny;
  for (std::int64_t z0 = 0; z0 < in.dims().nz; z0 += g.planes_per_chunk) {
    const std::int64_t z1 = std::min(in.dims().nz, z0 + g.planes_per_chunk);
    const auto col = im2col(in, g, s.padding, z0, z1);
    ConstStridedMap<T> dy(grad_out.data() + z0 * plane, s.out_channels, (z1 - z0) * plane, Eigen::OuterStride<>(v));
    gw.noalias() += dy * col.transpose();
  }
  // The input gradient is the same convolution applied to grad_out with the
  // kernel flipped in space and its channel axes swapped.
  const std::int64_t k3 = s.kernel * s.kernel * s.kernel;
  std::vector<T> flipped(weight.size());
  for (std::int64_t o = 0; o < s.out_channels; ++o) {
    for (std::int64_t c = 0; c < s.in_channels; ++c) {
      for (std::int64_t q = 0; q < k3; ++q) {
        flipped[static_cast<std::size_t>((c * s.out_channels + o) * k3 + (k3 - 1 - q))] =
            weight[static_cast<std::size_t>((o * s.in_channels + c) * k3 + q)];
      }
    }
  }
  const std::vector<T> zero(static_cast<std::size_t>(s.in_channels), T(0));
  grad_in = conv3d<T>(grad_out, ConvShape{s.out_channels, s.in_channels, s.kernel, s.padding}, flipped, zero);
  return grad_in;
}

namespace {
template <typename T>
constexpr T kNormEps = T(1e-6);
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& in, std::span<const T> gain) {
  const std::int64_t c = in.channels();
  const std::int64_t v = in.voxels();
  if (static_cast<std::int64_t>(gain.size()) != c) throw ShapeError("rms_norm: gain size mismatch");
  Tensor<T> out(c, in.dims());
  std::vector<T> inv(static_cast<std::size_t>(v), T(0));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* x = in.data() + ch * v;
    for (std::int64_t i = 0; i < v; ++i) inv[static_cast<std::size_t>(i)] += x[i] * x[i];
  }
  for (T& s : inv) s = T(1) / std::sqrt(s / static_cast<T>(c) + kNormEps<T>);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* x = in.data() + ch * v;
    T* y = out.data() + ch * v;
    const T g = gain[static_cast<std::size_t>(ch)];
    for (std::int64_t i = 0; i < v; ++i) y[i] = g * x[i] * inv[static_cast<std::size_t>(i)];
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm_backward(const Tensor<T>& in, const Tensor<T>& grad_out, std::span<const T> gain,
                            std::span<T> grad_gain) {
  const std::int64_t c = in.channels();
  const std::int64_t v = in.voxels();
  std::vector<T> inv(static_cast<std::size_t>(v), T(0));
  std::vector<T> dot(static_cast<std::size_t>(v), T(0));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* x = in.data() + ch * v;
    const T* dy = grad_out.data() + ch * v;
    const T g = gain[static_cast<std::size_t>(ch)];
    for (std::int64_t i = 0; i < v; ++i) {
      inv[static_cast<std::size_t>(i)] += x[i] * x[i];
      dot[static_cast<std::size_t>(i)] += g * dy[i] * x[i];
    }
  }
  for (T& s : inv) s = T(1) / std::sqrt(s / static_cast<T>(c) + kNormEps<T>);
  Tensor<T> grad_in(c, in.dims());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* x = in.data() + ch * v;
    const T* dy = grad_out.data() + ch * v;
    T* dx = grad_in.data() + ch * v;
    const T g = gain[static_cast<std::size_t>(ch)];
    T dg = 0;
    for (std::int64_t i = 0; i < v; ++i) {
      const T r = inv[static_cast<std::size_t>(i)];
      dg += dy[i] * x[i] * r;
      dx[i] = g * dy[i] * r - x[i] * dot[static_cast<std::size_t>(i)] * r * r * r / static_cast<T>(c);
    }
    grad_gain[static_cast<std::size_t>(ch)] += dg;
  }
  return grad_in;
}

template <typename T>
Tensor<T> scale_shift(const Tensor<T>& in, std::span<const T> scale, std::span<const T> shift) {
  Tensor<T> out(in.channels(), in.dims());
  const std::int64_t v = in.voxels();
  for (std::int64_t ch = 0; ch < in.channels(); ++ch) {
    const T a = T(1) + scale[static_cast<std::size_t>(ch)];
    const T b = shift[static_cast<std::size_t>(ch)];
    const T* x = in.data() + ch * v;
    T* y = out.data() + ch * v;
    for (std::int64_t i = 0; i < v; ++i) y[i] = x[i] * a + b;
  }
  return out;
}

template <typename T>
Tensor<T> scale_shift_backward(const Tensor<T>& in, const Tensor<T>& grad_out, std::span<const T> scale,
                               std::span<T> grad_scale, std::span<T> grad_shift) {
  Tensor<T> grad_in(in.channels(), in.dims());
  const std::int64_t v = in.voxels();
  for (std::int64_t ch = 0; ch < in.channels(); ++ch) {
    const T a = T(1) + scale[static_cast<std::size_t>(ch)];
    const T* x = in.data() + ch * v;
    const T* dy = grad_out.data() + ch * v;
    T* dx = grad_in.data() + ch * v;
    T ds = 0;
    T db = 0;
    for (std::int64_t i = 0; i < v; ++i) {
      dx[i] = dy[i] * a;
      ds += dy[i] * x[i];
      db += dy[i];
    }
    grad_scale[static_cast<std::size_t>(ch)] += ds;
    grad_shift[static_cast<std::size_t>(ch)] += db;
  }
  return grad_in;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& in) {
  Tensor<T> out(in.channels(), in.dims());
  for (std::int64_t i = 0; i < in.size(); ++i) {
    const T x = in[i];
    out[i] = x / (T(1) + std::exp(-x));
  }
  return out;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& in, const Tensor<T>& grad_out) {
  Tensor<T> grad_in(in.channels(), in.dims());
  for (std::int64_t i = 0; i < in.size(); ++i) {
    const T x = in[i];
    const T s = T(1) / (T(1) + std::exp(-x));
    grad_in[i] = grad_out[i] * s * (T(1) + x * (T(1) - s));
  }
  return grad_in;
}

template <typename T>
Tensor<T> space_to_channel(const Tensor<T>& in) {
  const Dims& d = in.dims();
  if (d.nx % 2 || d.ny % 2 || d.nz % 2) throw ShapeError("space_to_channel: dims must be even");
  const Dims od{d.nx / 2, d.ny / 2, d.nz / 2};
  Tensor<T> out(in.channels() * 8, od);
  for (std::int64_t c = 0; c < in.channels(); ++c) {
    for (std::int64_t z = 0; z < d.nz; ++z) {
      for (std::int64_t y = 0; y < d.ny; ++y) {
        for (std::int64_t x = 0; x < d.nx; ++x) {
          const std::int64_t sub = (z % 2) * 4 + (y % 2) * 2 + (x % 2);
          const std::int64_t oc = c * 8 + sub;
          out[oc * od.total() + (x / 2) + od.nx * ((y / 2) + od.ny * (z / 2))] =
              in[c * d.total() + x + d.nx * (y + d.ny * z)];
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> channel_to_space(const Tensor<T>& in) {
  const Dims& d = in.dims();
  if (in.channels() % 8) throw ShapeError("channel_to_space: channels must be a multiple of 8");
  const Dims od{d.nx * 2, d.ny * 2, d.nz * 2};
  Tensor<T> out(in.channels() / 8, od);
  for (std::int64_t c = 0; c < out.channels(); ++c) {
    for (std::int64_t z = 0; z < od.nz; ++z) {
      for (std::int64_t y = 0; y < od.ny; ++y) {
        for (std::int64_t x = 0; x < od.nx; ++x) {
          const std::int64_t sub = (z % 2) * 4 + (y % 2) * 2 + (x % 2);
          out[c * od.total() + x + od.nx * (y + od.ny * z)] =
              in[(c * 8 + sub) * d.total() + (x / 2) + d.nx * ((y / 2) + d.ny * (z / 2))];
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& in) {
  const Dims& d = in.dims();
  const Dims od{d.nx * 2, d.ny * 2, d.nz * 2};
  Tensor<T> out(in.channels(), od);
  for (std::int64_t c = 0; c < in.channels(); ++c) {
    for (std::int64_t z = 0; z < od.nz; ++z) {
      for (std::int64_t y = 0; y < od.ny; ++y) {
        const T* src = in.data() + c * d.total() + d.nx * ((y / 2) + d.ny * (z / 2));
        T* dst = out.data() + c * od.total() + od.nx * (y + od.ny * z);
        for (std::int64_t x = 0; x < od.nx; ++x) dst[x] = src[x / 2];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out) {
  const Dims& od = grad_out.dims();
  const Dims d{od.nx / 2, od.ny / 2, od.nz / 2};
  Tensor<T> grad_in(grad_out.channels(), d);
  for (std::int64_t c = 0; c < grad_out.channels(); ++c) {
    for (std::int64_t z = 0; z < od.nz; ++z) {
      for (std::int64_t y = 0; y < od.ny; ++y) {
        const T* src = grad_out.data() + c * od.total() + od.nx * (y + od.ny * z);
        T* dst = grad_in.data() + c * d.total() + d.nx * ((y / 2) + d.ny * (z / 2));
        for (std::int64_t x = 0; x < od.nx; ++x) dst[x / 2] += src[x];
      }
    }
  }
  return grad_in;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.dims() == b.dims())) throw ShapeError("concat_channels: spatial dims differ");
  Tensor<T> out(a.channels() + b.channels(), a.dims());
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + a.size());
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& grad, Tensor<T>& grad_a, Tensor<T>& grad_b, std::int64_t channels_a) {
  grad_a = Tensor<T>(channels_a, grad.dims());
  grad_b = Tensor<T>(grad.channels() - channels_a, grad.dims());
  std::copy(grad.storage().begin(), grad.storage().begin() + grad_a.size(), grad_a.storage().begin());
  std::copy(grad.storage().begin() + grad_a.size(), grad.storage().end(), grad_b.storage().begin());
}

#define HARMONY_INSTANTIATE_LAYERS(T)                                                                            \
  template Tensor<T> conv3d(const Tensor<T>&, const ConvShape&, std::span<const T>, std::span<const T>);          \
  template Tensor<T> conv3d_backward(const Tensor<T>&, const Tensor<T>&, const ConvShape&, std::span<const T>,   \
                                     std::span<T>, std::span<T>);                                                 \
  template Tensor<T> rms_norm(const Tensor<T>&, std::span<const T>);                                              \
  template Tensor<T> rms_norm_backward(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::span<T>);    \
  template Tensor<T> scale_shift(const Tensor<T>&, std::span<const T>, std::span<const T>);                       \
  template Tensor<T> scale_shift_backward(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::span<T>,  \
                                          std::span<T>);                                                          \
  template Tensor<T> silu(const Tensor<T>&);                                                                      \
  template Tensor<T> silu_backward(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> space_to_channel(const Tensor<T>&);                                                          \
  template Tensor<T> channel_to_space(const Tensor<T>&);                                                          \
  template Tensor<T> upsample_nearest(const Tensor<T>&);                                                          \
  template Tensor<T> upsample_nearest_backward(const Tensor<T>&);                                                 \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                         \
  template void split_channels(const Tensor<T>&, Tensor<T>&, Tensor<T>&, std::int64_t);

HARMONY_INSTANTIATE_LAYERS(float)
HARMONY_INSTANTIATE_LAYERS(double)

}  // namespace harmony::nn
