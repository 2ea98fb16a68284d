#include "harmony/field.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "bytes.hpp"
#include "harmony/error.hpp"
#include "harmony/io.hpp"

namespace harmony {

namespace {

struct LinearSpec {
  std::int64_t in = 0;
  std::int64_t out = 0;
  std::int64_t w = 0;  // out x in, row-major
  std::int64_t b = 0;
};

struct NormSpec {
  std::int64_t channels = 0;
  std::int64_t g = 0;
};

struct ConvSpec {
  nn::ConvShape shape;
  std::int64_t w = 0;
  std::int64_t b = 0;
};

struct BlockSpec {
  ConvSpec conv1;
  NormSpec norm1;
  LinearSpec film;  // time embedding -> (scale, shift)
  ConvSpec conv2;
  NormSpec norm2;
  ConvSpec skip;  // 1x1 residual projection of the block input
};

struct LayoutBuilder {
  std::int64_t next = 0;
  const Architecture& arch;

  explicit LayoutBuilder(const Architecture& a) : arch(a) {}

  LinearSpec linear(std::int64_t in, std::int64_t out) {
    LinearSpec s{in, out, next, next + in * out};
    next += in * out + out;
    return s;
  }
  NormSpec norm(std::int64_t c) {
    NormSpec s{c, next};
    next += c;
    return s;
  }
  ConvSpec conv(std::int64_t in, std::int64_t out, std::int64_t k) {
    ConvSpec s;
    s.shape = {in, out, k, arch.padding};
    s.w = next;
    s.b = next + s.shape.weight_count();
    next += s.shape.parameter_count();
    return s;
  }
  BlockSpec block(std::int64_t in, std::int64_t out) {
    BlockSpec b;
    b.conv1 = conv(in, out, arch.kernel);
    b.norm1 = norm(out);
    b.film = linear(arch.time_dim, 2 * out);
    b.conv2 = conv(out, out, arch.kernel);
    b.norm2 = norm(out);
    b.skip = conv(in, out, 1);
    return b;
  }
};

struct NetworkLayout {
  LinearSpec time;
  std::vector<BlockSpec> enc;
  std::vector<ConvSpec> down;  // down[l]: level l -> l + 1
  std::vector<ConvSpec> up;    // up[l]: level l + 1 -> l
  std::vector<BlockSpec> dec;  // dec[l] at level l
  ConvSpec out;
  std::int64_t total = 0;

  explicit NetworkLayout(const Architecture& a) {
    LayoutBuilder b(a);
    time = b.linear(a.time_dim, a.time_dim);
    const std::int64_t levels = a.levels();
    enc.push_back(b.block(a.in_channels, a.width(0)));
    for (std::int64_t l = 1; l < levels; ++l) {
      down.push_back(b.conv(8 * a.width(l - 1), a.width(l), 1));
      enc.push_back(b.block(a.width(l), a.width(l)));
    }
    up.resize(static_cast<std::size_t>(levels - 1));
    dec.resize(static_cast<std::size_t>(levels - 1));
    for (std::int64_t l = levels - 2; l >= 0; --l) {
      up[static_cast<std::size_t>(l)] = b.conv(a.width(l + 1), a.width(l), a.kernel);
      dec[static_cast<std::size_t>(l)] = b.block(2 * a.width(l), a.width(l));
    }
    out = b.conv(a.width(0), 1, 1);
    total = b.next;
  }
};

template <typename T>
struct BlockRecord {
  Tensor<T> x, a1, n1, f1, h1, a2, n2;
  std::vector<T> film;  // scale then shift
};

}  // namespace

template <typename T>
struct VelocityField<T>::Layout : NetworkLayout {
  using NetworkLayout::NetworkLayout;
};

template <typename T>
struct FieldTape<T>::Storage {
  std::vector<T> emb;
  std::vector<T> time_pre;
  std::vector<T> temb;
  std::vector<BlockRecord<T>> enc;
  std::vector<Tensor<T>> down_in;  // space_to_channel output fed to down[l]
  std::vector<Tensor<T>> up_in;    // upsampled tensor fed to up[l]
  std::vector<BlockRecord<T>> dec;
  Tensor<T> last;                  // input of the output convolution
};

template <typename T>
FieldTape<T>::FieldTape() : storage(std::make_unique<Storage>()) {}
template <typename T>
FieldTape<T>::~FieldTape() = default;
template <typename T>
FieldTape<T>::FieldTape(FieldTape&&) noexcept = default;
template <typename T>
FieldTape<T>& FieldTape<T>::operator=(FieldTape&&) noexcept = default;

std::int64_t Architecture::parameter_count() const {
  validate();
  return NetworkLayout(*this).total;
}

void Architecture::validate() const {
  if (in_channels < 1) throw UsageError("architecture: in_channels must be >= 1");
  if (base_width < 1) throw UsageError("architecture: base_width must be >= 1");
  if (multipliers.empty()) throw UsageError("architecture: at least one level is required");
  for (auto m : multipliers) {
    if (m < 1) throw UsageError("architecture: multipliers must be >= 1");
  }
  if (kernel < 1 || kernel % 2 == 0) throw UsageError("architecture: kernel must be odd");
  if (time_dim < 2 || time_dim % 2) throw UsageError("architecture: time_dim must be even and >= 2");
}

namespace {

template <typename T>
std::span<const T> slice(const std::vector<T>& p, std::int64_t off, std::int64_t n) {
  return {p.data() + off, static_cast<std::size_t>(n)};
}

template <typename T>
std::span<T> slice(std::vector<T>& p, std::int64_t off, std::int64_t n) {
  return {p.data() + off, static_cast<std::size_t>(n)};
}

template <typename T>
std::vector<T> sinusoidal_embedding(double t, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  std::vector<T> e(static_cast<std::size_t>(dim));
  for (std::int64_t j = 0; j < half; ++j) {
    const double f = half > 1 ? std::exp(std::log(100.0) * static_cast<double>(j) / static_cast<double>(half - 1)) : 1.0;
    e[static_cast<std::size_t>(j)] = static_cast<T>(std::sin(t * f));
    e[static_cast<std::size_t>(half + j)] = static_cast<T>(std::cos(t * f));
  }
  return e;
}

template <typename T>
std::vector<T> linear_forward(const LinearSpec& s, const std::vector<T>& params, const std::vector<T>& x) {
  std::vector<T> y(static_cast<std::size_t>(s.out));
  for (std::int64_t o = 0; o < s.out; ++o) {
    T acc = params[static_cast<std::size_t>(s.b + o)];
    const T* w = params.data() + s.w + o * s.in;
    for (std::int64_t i = 0; i < s.in; ++i) acc += w[i] * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

// Accumulates parameter gradients; returns d/dx.
template <typename T>
std::vector<T> linear_backward(const LinearSpec& s, const std::vector<T>& params, const std::vector<T>& x,
                               const std::vector<T>& dy, std::vector<T>& grads) {
  std::vector<T> dx(static_cast<std::size_t>(s.in), T(0));
  for (std::int64_t o = 0; o < s.out; ++o) {
    const T g = dy[static_cast<std::size_t>(o)];
    grads[static_cast<std::size_t>(s.b + o)] += g;
    const T* w = params.data() + s.w + o * s.in;
    T* gw = grads.data() + s.w + o * s.in;
    for (std::int64_t i = 0; i < s.in; ++i) {
      gw[i] += g * x[static_cast<std::size_t>(i)];
      dx[static_cast<std::size_t>(i)] += g * w[i];
    }
  }
  return dx;
}

template <typename T>
T silu_scalar(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
T silu_grad_scalar(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

template <typename T>
Tensor<T> conv_forward(const ConvSpec& c, const std::vector<T>& p, const Tensor<T>& x) {
  return nn::conv3d<T>(x, c.shape, slice(p, c.w, c.shape.weight_count()), slice(p, c.b, c.shape.out_channels));
}

template <typename T>
Tensor<T> conv_backward(const ConvSpec& c, const std::vector<T>& p, const Tensor<T>& x, const Tensor<T>& dy,
                        std::vector<T>& g) {
  return nn::conv3d_backward<T>(x, dy, c.shape, slice(p, c.w, c.shape.weight_count()),
                                slice(g, c.w, c.shape.weight_count()), slice(g, c.b, c.shape.out_channels));
}

void add_into(auto& dst, const auto& src) {
  for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> block_forward(const BlockSpec& b, const std::vector<T>& p, const Tensor<T>& x, const std::vector<T>& temb,
                        BlockRecord<T>* rec) {
  const std::int64_t c = b.conv1.shape.out_channels;
  Tensor<T> a1 = conv_forward(b.conv1, p, x);
  Tensor<T> n1 = nn::rms_norm<T>(a1, slice(p, b.norm1.g, c));
  std::vector<T> film = linear_forward(b.film, p, temb);
  std::span<const T> scale(film.data(), static_cast<std::size_t>(c));
  std::span<const T> shift(film.data() + c, static_cast<std::size_t>(c));
  Tensor<T> f1 = nn::scale_shift<T>(n1, scale, shift);
  Tensor<T> h1 = nn::silu(f1);
  Tensor<T> a2 = conv_forward(b.conv2, p, h1);
  Tensor<T> n2 = nn::rms_norm<T>(a2, slice(p, b.norm2.g, c));
  Tensor<T> out = nn::silu(n2);
  add_into(out, conv_forward(b.skip, p, x));
  if (rec) {
    rec->x = x;
    rec->a1 = std::move(a1);
    rec->n1 = std::move(n1);
    rec->f1 = std::move(f1);
    rec->h1 = std::move(h1);
    rec->a2 = std::move(a2);
    rec->n2 = std::move(n2);
    rec->film = std::move(film);
  }
  return out;
}

template <typename T>
Tensor<T> block_backward(const BlockSpec& b, const std::vector<T>& p, const BlockRecord<T>& r,
                         const std::vector<T>& temb, const Tensor<T>& dout, std::vector<T>& g,
                         std::vector<T>& dtemb) {
  const std::int64_t c = b.conv1.shape.out_channels;
  Tensor<T> dn2 = nn::silu_backward(r.n2, dout);
  Tensor<T> da2 = nn::rms_norm_backward<T>(r.a2, dn2, slice(p, b.norm2.g, c), slice(g, b.norm2.g, c));
  Tensor<T> dh1 = conv_backward(b.conv2, p, r.h1, da2, g);
  Tensor<T> df1 = nn::silu_backward(r.f1, dh1);
  std::vector<T> dfilm(static_cast<std::size_t>(2 * c), T(0));
  std::span<const T> scale(r.film.data(), static_cast<std::size_t>(c));
  Tensor<T> dn1 = nn::scale_shift_backward<T>(r.n1, df1, scale, std::span<T>(dfilm.data(), static_cast<std::size_t>(c)),
                                              std::span<T>(dfilm.data() + c, static_cast<std::size_t>(c)));
  const auto dt = linear_backward(b.film, p, temb, dfilm, g);
  for (std::size_t i = 0; i < dtemb.size(); ++i) dtemb[i] += dt[i];
  Tensor<T> da1 = nn::rms_norm_backward<T>(r.a1, dn1, slice(p, b.norm1.g, c), slice(g, b.norm1.g, c));
  Tensor<T> dx = conv_backward(b.conv1, p, r.x, da1, g);
  add_into(dx, conv_backward(b.skip, p, r.x, dout, g));
  return dx;
}

}  // namespace

template <typename T>
VelocityField<T>::VelocityField(Architecture arch) : arch_(std::move(arch)) {
  arch_.validate();
  layout_ = std::make_unique<Layout>(arch_);
  params_.assign(static_cast<std::size_t>(layout_->total), T(0));
}

template <typename T>
VelocityField<T>::VelocityField(Architecture arch, std::vector<T> params) : arch_(std::move(arch)), params_(std::move(params)) {
  arch_.validate();
  layout_ = std::make_unique<Layout>(arch_);
  if (static_cast<std::int64_t>(params_.size()) != layout_->total) {
    throw ShapeError("parameter vector length " + std::to_string(params_.size()) + " does not match architecture (" +
                     std::to_string(layout_->total) + ")");
  }
}

template <typename T>
VelocityField<T>::VelocityField(const VelocityField& o)
    : arch_(o.arch_), params_(o.params_), layout_(std::make_unique<Layout>(*o.layout_)) {}

template <typename T>
VelocityField<T>::VelocityField(VelocityField&&) noexcept = default;

template <typename T>
VelocityField<T>& VelocityField<T>::operator=(const VelocityField& o) {
  if (this != &o) {
    arch_ = o.arch_;
    params_ = o.params_;
    layout_ = std::make_unique<Layout>(*o.layout_);
  }
  return *this;
}

template <typename T>
VelocityField<T>& VelocityField<T>::operator=(VelocityField&&) noexcept = default;

template <typename T>
VelocityField<T>::~VelocityField() = default;

template <typename T>
Tensor<T> VelocityField<T>::forward(const Tensor<T>& input, double t) const {
  return run(input, t, nullptr);
}

template <typename T>
Tensor<T> VelocityField<T>::forward(const Tensor<T>& input, double t, FieldTape<T>& tape) const {
  if (!tape.storage) tape.storage = std::make_unique<typename FieldTape<T>::Storage>();
  return run(input, t, tape.storage.get());
}

template <typename T>
Tensor<T> VelocityField<T>::run(const Tensor<T>& input, double t, typename FieldTape<T>::Storage* s) const {
  const Layout& L = *layout_;
  if (input.channels() != arch_.in_channels) throw ShapeError("field input has the wrong channel count");
  const std::int64_t m = arch_.spatial_multiple();
  const Dims& d = input.dims();
  if (d.nx % m || d.ny % m || d.nz % m) {
    throw ShapeError("field input dims must be divisible by " + std::to_string(m));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw UsageError("time must lie in [0, 1]");

  std::vector<T> emb = sinusoidal_embedding<T>(t, arch_.time_dim);
  std::vector<T> pre = linear_forward(L.time, params_, emb);
  std::vector<T> temb(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) temb[i] = silu_scalar(pre[i]);

  const std::size_t levels = static_cast<std::size_t>(arch_.levels());
  if (s) {
    s->enc.assign(levels, {});
    s->dec.assign(levels - 1, {});
    s->down_in.assign(levels - 1, {});
    s->up_in.assign(levels - 1, {});
  }
  std::vector<Tensor<T>> skips(levels);
  Tensor<T> h = block_forward(L.enc[0], params_, input, temb, s ? &s->enc[0] : nullptr);
  skips[0] = h;
  for (std::size_t l = 1; l < levels; ++l) {
    Tensor<T> sc = nn::space_to_channel(h);
    Tensor<T> dn = conv_forward(L.down[l - 1], params_, sc);
    if (s) s->down_in[l - 1] = std::move(sc);
    h = block_forward(L.enc[l], params_, dn, temb, s ? &s->enc[l] : nullptr);
    if (l + 1 < levels) skips[l] = h;
  }
  for (std::size_t li = levels - 1; li-- > 0;) {
    Tensor<T> u = nn::upsample_nearest(h);
    Tensor<T> c = conv_forward(L.up[li], params_, u);
    if (s) s->up_in[li] = std::move(u);
    Tensor<T> cat = nn::concat_channels(c, skips[li]);
    h = block_forward(L.dec[li], params_, cat, temb, s ? &s->dec[li] : nullptr);
  }
  Tensor<T> out = conv_forward(L.out, params_, h);
  if (s) {
    s->emb = std::move(emb);
    s->time_pre = std::move(pre);
    s->temb = std::move(temb);
    s->last = std::move(h);
  }
  return out;
}

template <typename T>
void VelocityField<T>::backward(const FieldTape<T>& tape, const Tensor<T>& grad_output, FieldGradients<T>& grads) const {
  const Layout& L = *layout_;
  const auto* s = tape.storage.get();
  if (!s || s->enc.empty()) throw UsageError("backward needs a tape recorded by forward");
  if (grads.values.size() != params_.size()) throw ShapeError("gradient buffer length mismatch");
  if (grad_output.channels() != 1 || !(grad_output.dims() == s->last.dims())) {
    throw ShapeError("grad_output shape does not match the recorded forward pass");
  }
  auto& g = grads.values;
  const std::size_t levels = static_cast<std::size_t>(arch_.levels());
  std::vector<T> dtemb(s->temb.size(), T(0));

  Tensor<T> dh = conv_backward(L.out, params_, s->last, grad_output, g);
  std::vector<Tensor<T>> dskip(levels);
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    Tensor<T> dcat = block_backward(L.dec[l], params_, s->dec[l], s->temb, dh, g, dtemb);
    Tensor<T> dc;
    nn::split_channels(dcat, dc, dskip[l], arch_.width(static_cast<std::int64_t>(l)));
    Tensor<T> du = conv_backward(L.up[l], params_, s->up_in[l], dc, g);
    dh = nn::upsample_nearest_backward(du);
  }
  for (std::size_t l = levels; l-- > 0;) {
    if (l + 1 < levels) add_into(dh, dskip[l]);
    Tensor<T> dx = block_backward(L.enc[l], params_, s->enc[l], s->temb, dh, g, dtemb);
    if (l == 0) break;
    Tensor<T> dsc = conv_backward(L.down[l - 1], params_, s->down_in[l - 1], dx, g);
    dh = nn::channel_to_space(dsc);
  }
  std::vector<T> dpre(dtemb.size());
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = dtemb[i] * silu_grad_scalar(s->time_pre[i]);
  linear_backward(L.time, params_, s->emb, dpre, g);
}

template <typename T>
std::vector<T> init_params(const Architecture& arch, Rng& rng) {
  arch.validate();
  const NetworkLayout L(arch);
  std::vector<T> p(static_cast<std::size_t>(L.total), T(0));
  auto fill_uniform = [&](std::int64_t off, std::int64_t n, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(off + i)] = static_cast<T>(u(rng));
  };
  auto init_conv = [&](const ConvSpec& c) {
    const auto fan_in = c.shape.in_channels * c.shape.kernel * c.shape.kernel * c.shape.kernel;
    fill_uniform(c.w, c.shape.weight_count(), std::sqrt(3.0 / static_cast<double>(fan_in)));
  };
  auto init_norm = [&](const NormSpec& n) {
    for (std::int64_t i = 0; i < n.channels; ++i) p[static_cast<std::size_t>(n.g + i)] = T(1);
  };
  auto init_linear = [&](const LinearSpec& l, double gain) {
    fill_uniform(l.w, l.in * l.out, gain / std::sqrt(static_cast<double>(l.in)));
  };
  auto init_block = [&](const BlockSpec& b) {
    init_conv(b.conv1);
    init_norm(b.norm1);
    init_linear(b.film, 0.1);
    init_conv(b.conv2);
    init_norm(b.norm2);
    init_conv(b.skip);
  };
  init_linear(L.time, 1.0);
  for (const auto& b : L.enc) init_block(b);
  for (const auto& c : L.down) init_conv(c);
  for (const auto& c : L.up) init_conv(c);
  for (const auto& b : L.dec) init_block(b);
  // L.out stays zero.
  return p;
}

template <typename T>
Tensor<T> make_field_input(std::span<const double> x_t, std::span<const double> edge, const CoordChannels& coords,
                           const Dims& dims) {
  const auto v = static_cast<std::size_t>(dims.total());
  if (x_t.size() != v || edge.size() != v || coords[0].size() != v || coords[1].size() != v || coords[2].size() != v) {
    throw ShapeError("field input channels must share the spatial shape");
  }
  Tensor<T> in(5, dims);
  const std::span<const double> chans[5] = {x_t, edge, coords[0], coords[1], coords[2]};
  for (std::int64_t c = 0; c < 5; ++c) {
    auto dst = in.channel(c);
    for (std::size_t i = 0; i < v; ++i) dst[i] = static_cast<T>(chans[c][i]);
  }
  return in;
}

namespace {

constexpr char kCkptMagic[4] = {'H', 'F', 'L', 'D'};
constexpr std::uint16_t kCkptVersion = 1;

}  // namespace

void save_checkpoint(const VelocityField<float>& field, const std::filesystem::path& path) {
  const auto& a = field.architecture();
  std::string out(kCkptMagic, 4);
  detail::put_le(out, kCkptVersion);
  detail::put_le(out, a.in_channels);
  detail::put_le(out, a.base_width);
  detail::put_le(out, a.kernel);
  detail::put_le(out, a.time_dim);
  detail::put_le(out, static_cast<std::uint8_t>(a.padding == nn::Padding::periodic ? 1 : 0));
  detail::put_le(out, static_cast<std::uint32_t>(a.multipliers.size()));
  for (auto m : a.multipliers) detail::put_le(out, m);
  detail::put_le(out, static_cast<std::uint64_t>(field.parameter_count()));
  for (float p : field.params()) detail::put_le(out, p);
  write_file_atomic(path, out);
}

VelocityField<float> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  detail::ByteReader in(bytes);
  in.seek(4);
  if (in.get<std::uint16_t>() != kCkptVersion) throw DataError("checkpoint: unsupported version");
  Architecture a;
  a.in_channels = in.get<std::int64_t>();
  a.base_width = in.get<std::int64_t>();
  a.kernel = in.get<std::int64_t>();
  a.time_dim = in.get<std::int64_t>();
  a.padding = in.get<std::uint8_t>() ? nn::Padding::periodic : nn::Padding::zero;
  const auto levels = in.get<std::uint32_t>();
  if (levels == 0 || levels > 16) throw DataError("checkpoint: implausible level count");
  a.multipliers.resize(levels);
  for (auto& m : a.multipliers) m = in.get<std::int64_t>();
  try {
    a.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: invalid architecture: ") + e.what());
  }
  const auto n = in.get<std::uint64_t>();
  if (static_cast<std::int64_t>(n) != a.parameter_count()) {
    throw DataError("checkpoint: parameter count does not match its architecture descriptor");
  }
  if (in.remaining() != n * 4) throw DataError("checkpoint: truncated parameter payload");
  std::vector<float> params(n);
  for (auto& p : params) p = in.get<float>();
  return VelocityField<float>(a, std::move(params));
}

VelocityField<float> load_checkpoint(const std::filesystem::path& path, const Architecture& expected) {
  auto f = load_checkpoint(path);
  if (!(f.architecture() == expected)) throw DataError("checkpoint architecture does not match the requested one");
  return f;
}

template class VelocityField<float>;
template class VelocityField<double>;
template struct FieldTape<float>;
template struct FieldTape<double>;
template std::vector<float> init_params<float>(const Architecture&, Rng&);
template std::vector<double> init_params<double>(const Architecture&, Rng&);
template Tensor<float> make_field_input<float>(std::span<const double>, std::span<const double>, const CoordChannels&,
                                               const Dims&);
template Tensor<double> make_field_input<double>(std::span<const double>, std::span<const double>,
                                                 const CoordChannels&, const Dims&);

}  // namespace harmony
