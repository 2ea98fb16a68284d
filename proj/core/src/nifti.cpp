#include <cmath>
#include <cstring>

#include "bytes.hpp"
#include "harmony/error.hpp"
#include "harmony/io.hpp"
#include "harmony/volume.hpp"

namespace harmony {

namespace {

constexpr std::int32_t kHeaderSize = 348;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

}  // namespace

Volume3D load_nifti(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize)) throw DataError("nifti: file shorter than header");

  bool big_endian = false;
  {
    detail::ByteReader probe(bytes);
    const auto sizeof_hdr = probe.get<std::int32_t>();
    if (sizeof_hdr != kHeaderSize) {
      detail::ByteReader swapped(bytes, true);
      if (swapped.get<std::int32_t>() != kHeaderSize) throw DataError("nifti: sizeof_hdr is not 348");
      big_endian = true;
    }
  }
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0) {
    throw DataError("nifti: only single-file .nii (magic n+1) is supported");
  }

  detail::ByteReader in(bytes, big_endian);
  in.seek(40);
  std::int16_t dim[8];
  for (auto& d : dim) d = in.get<std::int16_t>();
  if (dim[0] < 1 || dim[0] > 7) throw DataError("nifti: dim[0] out of range");
  for (int a = 4; a <= dim[0]; ++a) {
    if (dim[a] != 1) throw DataError("nifti: only 3D volumes are supported");
  }
  Dims d;
  d.nx = dim[1];
  d.ny = dim[0] >= 2 ? dim[2] : 1;
  d.nz = dim[0] >= 3 ? dim[3] : 1;
  if (d.nx < 1 || d.ny < 1 || d.nz < 1) throw DataError("nifti: non-positive dimension");

  in.seek(70);
  const auto datatype = in.get<std::int16_t>();
  const auto bitpix = in.get<std::int16_t>();
  if (datatype != kDtFloat32 && datatype != kDtInt16) {
    throw DataError("nifti: unsupported datatype " + std::to_string(datatype));
  }
  if ((datatype == kDtFloat32 && bitpix != 32) || (datatype == kDtInt16 && bitpix != 16)) {
    throw DataError("nifti: bitpix does not match datatype");
  }
  in.seek(76);
  float pixdim[8];
  for (auto& p : pixdim) p = in.get<float>();
  const auto vox_offset = in.get<float>();
  const auto slope = in.get<float>();
  const auto inter = in.get<float>();

  Spacing s;
  s.sx = pixdim[1] > 0 ? pixdim[1] : 1.0f;
  s.sy = pixdim[2] > 0 ? pixdim[2] : 1.0f;
  s.sz = pixdim[3] > 0 ? pixdim[3] : 1.0f;

  if (!(vox_offset >= kHeaderSize)) throw DataError("nifti: vox_offset precedes end of header");
  const auto offset = static_cast<std::size_t>(vox_offset);
  const std::size_t n = static_cast<std::size_t>(d.total());
  const std::size_t width = datatype == kDtFloat32 ? 4 : 2;
  if (offset > bytes.size() || bytes.size() - offset < n * width) {
    throw DataError("nifti: payload shorter than dims require");
  }
  in.seek(offset);
  const bool scaled = slope != 0.0f && !(slope == 1.0f && inter == 0.0f);
  std::vector<double> data(n);
  for (auto& x : data) {
    x = datatype == kDtFloat32 ? static_cast<double>(in.get<float>()) : static_cast<double>(in.get<std::int16_t>());
    if (scaled) x = static_cast<double>(slope) * x + static_cast<double>(inter);
  }
  return Volume3D(d, s, std::move(data));
}

}  // namespace harmony
