#include "harmony/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "bytes.hpp"
#include "harmony/error.hpp"
#include "harmony/io.hpp"

namespace harmony {

namespace {

constexpr char kMagic[4] = {'H', 'V', 'O', 'L'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 32;

enum RawFlags : std::uint16_t {
  kFlagMask = 1u << 0,
  kFlagBinary = 1u << 1,
  kFlagF64 = 1u << 2,
};

void check_dims(const Dims& d) {
  if (d.nx < 1 || d.ny < 1 || d.nz < 1) throw ShapeError("volume dims must be >= 1");
}

bool float_exact(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) {
    return static_cast<double>(static_cast<float>(x)) == x;
  });
}

std::string encode_raw(const Volume3D& v, bool binary) {
  const bool f64 = !binary && !float_exact(v.values());
  std::uint16_t flags = 0;
  if (v.has_mask()) flags |= kFlagMask;
  if (binary) flags |= kFlagBinary;
  if (f64) flags |= kFlagF64;

  std::string out;
  const std::size_t width = binary ? 1 : (f64 ? 8 : 4);
  out.reserve(kHeaderBytes + v.values().size() * (width + (v.has_mask() ? 1 : 0)));
  out.append(kMagic, 4);
  detail::put_le(out, kVersion);
  for (int a = 0; a < 3; ++a) detail::put_le(out, static_cast<std::uint32_t>(v.dims()[a]));
  for (int a = 0; a < 3; ++a) detail::put_le(out, v.spacing()[a]);
  detail::put_le(out, flags);

  for (double x : v.values()) {
    if (binary) {
      out.push_back(x != 0.0 ? 1 : 0);
    } else if (f64) {
      detail::put_le(out, x);
    } else {
      detail::put_le(out, static_cast<float>(x));
    }
  }
  if (v.has_mask()) {
    for (auto m : *v.mask()) out.push_back(m ? 1 : 0);
  }
  return out;
}

Volume3D decode_raw(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw DataError("raw-v1: file shorter than header");
  if (!std::equal(kMagic, kMagic + 4, bytes.begin())) throw DataError("raw-v1: bad magic");
  detail::ByteReader in(bytes);
  in.seek(4);
  const auto version = in.get<std::uint16_t>();
  if (version != kVersion) throw DataError("raw-v1: unsupported version " + std::to_string(version));
  Dims d;
  d.nx = in.get<std::uint32_t>();
  d.ny = in.get<std::uint32_t>();
  d.nz = in.get<std::uint32_t>();
  check_dims(d);
  Spacing s;
  s.sx = in.get<float>();
  s.sy = in.get<float>();
  s.sz = in.get<float>();
  const auto flags = in.get<std::uint16_t>();
  if (flags & ~(kFlagMask | kFlagBinary | kFlagF64)) throw DataError("raw-v1: unknown flag bits");

  const bool binary = flags & kFlagBinary;
  const bool f64 = flags & kFlagF64;
  const bool has_mask = flags & kFlagMask;
  const std::size_t n = static_cast<std::size_t>(d.total());
  const std::size_t width = binary ? 1 : (f64 ? 8 : 4);
  const std::size_t expected = n * width + (has_mask ? n : 0);
  if (in.remaining() != expected) {
    std::ostringstream msg;
    msg << "raw-v1: payload is " << in.remaining() << " bytes, dims require " << expected;
    throw DataError(msg.str());
  }

  std::vector<double> data(n);
  for (auto& x : data) {
    if (binary) {
      x = in.get<std::uint8_t>() ? 1.0 : 0.0;
    } else if (f64) {
      x = in.get<double>();
    } else {
      x = in.get<float>();
    }
  }
  std::optional<Mask> mask;
  if (has_mask) {
    mask.emplace(n);
    for (auto& m : *mask) m = in.get<std::uint8_t>() ? 1 : 0;
  }
  return Volume3D(d, s, std::move(data), std::move(mask));
}

}  // namespace

Volume3D::Volume3D(Dims dims, Spacing spacing, double fill) : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  data_.assign(static_cast<std::size_t>(dims.total()), fill);
  check_finite();
}

Volume3D::Volume3D(Dims dims, Spacing spacing, std::vector<double> data, std::optional<Mask> mask)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  check_dims(dims);
  if (static_cast<std::int64_t>(data_.size()) != dims.total()) {
    throw ShapeError("volume data length does not match dims");
  }
  check_finite();
  if (mask) set_mask(std::move(*mask));
}

void Volume3D::set_mask(Mask mask) {
  if (mask.size() != data_.size()) throw ShapeError("mask length does not match volume");
  mask_ = std::move(mask);
}

double Volume3D::min() const { return *std::min_element(data_.begin(), data_.end()); }
double Volume3D::max() const { return *std::max_element(data_.begin(), data_.end()); }

void Volume3D::check_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) throw DataError("volume contains non-finite values");
  }
}

VolumeFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".nii" ? VolumeFormat::nifti1 : VolumeFormat::raw_v1;
}

Volume3D load_volume(const std::filesystem::path& path, VolumeFormat format) {
  if (format == VolumeFormat::nifti1) return load_nifti(path);
  const auto bytes = read_file(path);
  return decode_raw(bytes);
}

void save_volume(const Volume3D& v, const std::filesystem::path& path) {
  write_file_atomic(path, encode_raw(v, false));
}

void save_binary_volume(const Volume3D& v, const std::filesystem::path& path) {
  for (double x : v.values()) {
    if (x != 0.0 && x != 1.0) throw DataError("binary volume must contain only 0 and 1");
  }
  write_file_atomic(path, encode_raw(v, true));
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty sample");
  if (q < 0.0 || q > 100.0) throw UsageError("percentile must lie in [0, 100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Normalized normalize_percentile(const Volume3D& v, double lo, double hi) {
  if (!(hi > lo)) throw UsageError("upper percentile must exceed lower percentile");
  std::vector<double> sample;
  if (v.has_mask()) {
    const auto& m = *v.mask();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i]) sample.push_back(v[static_cast<std::int64_t>(i)]);
    }
    if (sample.empty()) throw DataError("normalization mask is empty");
  } else {
    sample.assign(v.values().begin(), v.values().end());
  }
  NormalizationRecord rec;
  rec.percentiles = {lo, hi};
  rec.p_low = percentile(sample, lo);
  rec.p_high = percentile(sample, hi);
  if (!(rec.p_high > rec.p_low)) {
    throw DegenerateInputError("percentile normalization: upper and lower percentiles coincide");
  }

  Volume3D out = v;
  const double scale = 1.0 / (rec.p_high - rec.p_low);
  for (double& x : out.values()) x = std::clamp((x - rec.p_low) * scale, 0.0, 1.0);
  return {std::move(out), rec};
}

Volume3D denormalize(const Volume3D& v, const NormalizationRecord& record) {
  Volume3D out = v;
  for (double& x : out.values()) x = record.p_low + x * (record.p_high - record.p_low);
  return out;
}

Volume3D index_downsample(const Volume3D& v, const Index3& stride) {
  const Dims& d = v.dims();
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw UsageError("stride components must be >= 1");
    if (d[a] % stride[a] != 0) throw ShapeError("dims are not divisible by the stride");
  }
  const Dims od{d.nx / stride[0], d.ny / stride[1], d.nz / stride[2]};
  const Spacing os{v.spacing().sx * static_cast<float>(stride[0]),
                   v.spacing().sy * static_cast<float>(stride[1]),
                   v.spacing().sz * static_cast<float>(stride[2])};
  std::vector<double> data(static_cast<std::size_t>(od.total()));
  std::optional<Mask> mask;
  if (v.has_mask()) mask.emplace(data.size());
  std::size_t o = 0;
  for (std::int64_t k = 0; k < od.nz; ++k) {
    for (std::int64_t j = 0; j < od.ny; ++j) {
      for (std::int64_t i = 0; i < od.nx; ++i, ++o) {
        const auto src = v.index(stride[0] * i, stride[1] * j, stride[2] * k);
        data[o] = v[src];
        if (mask) (*mask)[o] = (*v.mask())[static_cast<std::size_t>(src)];
      }
    }
  }
  return Volume3D(od, os, std::move(data), std::move(mask));
}

Mask threshold_mask(const Volume3D& v, double frac) {
  if (!(frac > 0.0 && frac < 1.0)) throw UsageError("mask fraction must lie in (0, 1)");
  const double cut = frac * v.max();
  Mask m(static_cast<std::size_t>(v.size()));
  for (std::int64_t i = 0; i < v.size(); ++i) m[static_cast<std::size_t>(i)] = v[i] > cut ? 1 : 0;
  return m;
}

std::int64_t count(const Mask& mask) {
  return std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
}

}  // namespace harmony
