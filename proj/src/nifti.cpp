#include "bundleseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <string>

namespace bundleseg {

std::string to_string(const Dims3& d) {
  return "(" + std::to_string(d.x) + "," + std::to_string(d.y) + "," + std::to_string(d.z) + ")";
}

namespace nifti {
namespace {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == kHeaderSize);

template <typename T>
void swap_in_place(T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(T));
}

template <typename T, std::size_t N>
void swap_in_place(T (&arr)[N]) {
  for (auto& v : arr) swap_in_place(v);
}

void swap_header(Header& h) {
  swap_in_place(h.sizeof_hdr);
  swap_in_place(h.extents);
  swap_in_place(h.session_error);
  swap_in_place(h.dim);
  swap_in_place(h.intent_p1);
  swap_in_place(h.intent_p2);
  swap_in_place(h.intent_p3);
  swap_in_place(h.intent_code);
  swap_in_place(h.datatype);
  swap_in_place(h.bitpix);
  swap_in_place(h.slice_start);
  swap_in_place(h.pixdim);
  swap_in_place(h.vox_offset);
  swap_in_place(h.scl_slope);
  swap_in_place(h.scl_inter);
  swap_in_place(h.slice_end);
  swap_in_place(h.cal_max);
  swap_in_place(h.cal_min);
  swap_in_place(h.slice_duration);
  swap_in_place(h.toffset);
  swap_in_place(h.glmax);
  swap_in_place(h.glmin);
  swap_in_place(h.qform_code);
  swap_in_place(h.sform_code);
  swap_in_place(h.quatern_b);
  swap_in_place(h.quatern_c);
  swap_in_place(h.quatern_d);
  swap_in_place(h.qoffset_x);
  swap_in_place(h.qoffset_y);
  swap_in_place(h.qoffset_z);
  swap_in_place(h.srow_x);
  swap_in_place(h.srow_y);
  swap_in_place(h.srow_z);
}

struct GzCloser {
  void operator()(gzFile f) const { gzclose(f); }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

bool has_gz_suffix(const std::filesystem::path& path) { return path.extension() == ".gz"; }

void read_exact(gzFile f, void* dst, std::size_t bytes, const std::filesystem::path& path) {
  auto* out = static_cast<char*>(dst);
  while (bytes > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw FormatError("unexpected end of file in " + path.string());
    out += got;
    bytes -= static_cast<std::size_t>(got);
  }
}

int element_size(short datatype) {
  switch (datatype) {
    case kUint8:
      return 1;
    case kInt16:
      return 2;
    case kFloat32:
      return 4;
    default:
      return 0;
  }
}

Geometry geometry_from(const Header& h) {
  Geometry g;
  for (int i = 0; i < 3; ++i) g.voxel_size_mm[i] = h.pixdim[i + 1];
  g.qfac = h.pixdim[0];
  g.qform_code = h.qform_code;
  g.sform_code = h.sform_code;
  g.quatern = {h.quatern_b, h.quatern_c, h.quatern_d};
  g.qoffset = {h.qoffset_x, h.qoffset_y, h.qoffset_z};
  if (h.sform_code > 0) {
    for (int j = 0; j < 4; ++j) {
      g.affine[0][j] = h.srow_x[j];
      g.affine[1][j] = h.srow_y[j];
      g.affine[2][j] = h.srow_z[j];
    }
  } else {
    g.affine = identity_affine();
    for (int i = 0; i < 3; ++i) g.affine[i][i] = h.pixdim[i + 1];
  }
  return g;
}

Header header_for(Dims3 dims, int channels, const Geometry& g, short datatype) {
  Header h{};
  h.sizeof_hdr = kHeaderSize;
  h.regular = 'r';
  h.dim[0] = channels > 1 ? 4 : 3;
  h.dim[1] = static_cast<std::int16_t>(dims.x);
  h.dim[2] = static_cast<std::int16_t>(dims.y);
  h.dim[3] = static_cast<std::int16_t>(dims.z);
  h.dim[4] = static_cast<std::int16_t>(channels);
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  h.datatype = datatype;
  h.bitpix = static_cast<std::int16_t>(8 * element_size(datatype));
  h.pixdim[0] = g.qfac;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = g.voxel_size_mm[i];
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = static_cast<float>(kDataOffset);
  h.scl_slope = 0.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // mm
  h.qform_code = g.qform_code;
  h.sform_code = g.sform_code;
  h.quatern_b = g.quatern[0];
  h.quatern_c = g.quatern[1];
  h.quatern_d = g.quatern[2];
  h.qoffset_x = g.qoffset[0];
  h.qoffset_y = g.qoffset[1];
  h.qoffset_z = g.qoffset[2];
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = g.affine[0][j];
    h.srow_y[j] = g.affine[1][j];
    h.srow_z[j] = g.affine[2][j];
  }
  std::memcpy(h.magic, "n+1\0", 4);
  return h;
}

void write_file(const std::filesystem::path& path, const Header& header, const void* body, std::size_t body_bytes) {
  std::string buffer(kDataOffset + body_bytes, '\0');
  std::memcpy(buffer.data(), &header, sizeof(Header));
  if (body_bytes > 0) std::memcpy(buffer.data() + kDataOffset, body, body_bytes);

  if (has_gz_suffix(path)) {
    GzHandle f(gzopen(path.string().c_str(), "wb6"));
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    std::size_t offset = 0;
    while (offset < buffer.size()) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(buffer.size() - offset, 1u << 30));
      if (gzwrite(f.get(), buffer.data() + offset, chunk) != static_cast<int>(chunk)) {
        throw IoError("write failed for " + path.string());
      }
      offset += chunk;
    }
    if (gzclose(f.release()) != Z_OK) throw IoError("close failed for " + path.string());
  } else {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    if (f == nullptr) throw IoError("cannot open " + path.string() + " for writing");
    const bool ok = std::fwrite(buffer.data(), 1, buffer.size(), f) == buffer.size();
    if (std::fclose(f) != 0 || !ok) throw IoError("write failed for " + path.string());
  }
}

}  // namespace

Image read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  // gzread passes uncompressed files through unchanged.
  GzHandle f(gzopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());

  Header h{};
  read_exact(f.get(), &h, sizeof(Header), path);
  bool swapped = false;
  if (h.sizeof_hdr != kHeaderSize) {
    auto probe = h.sizeof_hdr;
    swap_in_place(probe);
    if (probe != kHeaderSize) throw FormatError(path.string() + ": not a NIfTI-1 header (sizeof_hdr)");
    swap_header(h);
    swapped = true;
  }
  if (std::memcmp(h.magic, "n+1\0", 4) != 0) {
    throw FormatError(path.string() + ": missing single-file NIfTI-1 magic \"n+1\"");
  }
  if (h.dim[0] != 3 && h.dim[0] != 4) {
    throw FormatError(path.string() + ": dim[0] must be 3 or 4, got " + std::to_string(h.dim[0]));
  }
  const int elem = element_size(h.datatype);
  if (elem == 0) throw UnsupportedDatatype(path.string() + ": datatype code " + std::to_string(h.datatype));

  const Dims3 dims{h.dim[1], h.dim[2], h.dim[3]};
  const int channels = h.dim[0] == 4 ? h.dim[4] : 1;
  if (dims.x < 1 || dims.y < 1 || dims.z < 1 || channels < 1) {
    throw FormatError(path.string() + ": non-positive dimension");
  }
  const long offset = std::lround(h.vox_offset);
  if (offset < kHeaderSize) throw FormatError(path.string() + ": vox_offset below header size");
  std::vector<char> skip(static_cast<std::size_t>(offset - kHeaderSize));
  if (!skip.empty()) read_exact(f.get(), skip.data(), skip.size(), path);

  Volume<float> grid(dims, channels);
  const std::size_t n = grid.size();
  std::vector<unsigned char> raw(n * static_cast<std::size_t>(elem));
  read_exact(f.get(), raw.data(), raw.size(), path);

  auto& out = grid.data();
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = raw.data() + i * elem;
    switch (h.datatype) {
      case kUint8:
        out[i] = static_cast<float>(p[0]);
        break;
      case kInt16: {
        std::int16_t v;
        std::memcpy(&v, p, 2);
        if (swapped) swap_in_place(v);
        out[i] = static_cast<float>(v);
        break;
      }
      case kFloat32: {
        float v;
        std::memcpy(&v, p, 4);
        if (swapped) swap_in_place(v);
        out[i] = v;
        break;
      }
    }
  }
  if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    for (auto& v : out) v = v * h.scl_slope + h.scl_inter;
  }
  for (float v : out) {
    if (!std::isfinite(v)) throw CorruptData(path.string() + ": NaN or Inf in image data");
  }
  grid.geometry() = geometry_from(h);
  return Image{std::move(grid), h.datatype};
}

PeakVolume load_peaks(const std::filesystem::path& path) {
  Image img = read(path);
  if (img.grid.channels() != kPeakChannels) {
    throw ChannelCountError(path.string() + ": peak image needs 9 volumes along dim 4, got " +
                            std::to_string(img.grid.channels()));
  }
  return PeakVolume(std::move(img.grid));
}

BinaryMask load_mask(const std::filesystem::path& path) {
  Image img = read(path);
  if (img.grid.channels() != 1) throw ChannelCountError(path.string() + ": mask must be 3D");
  BinaryMask mask(img.grid.dims());
  mask.geometry() = img.grid.geometry();
  const bool integer = img.datatype != kFloat32;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const float v = img.grid.data()[i];
    if (integer || v == 0.0f || v == 1.0f) {
      mask.data()[i] = v != 0.0f ? 1 : 0;
    } else {
      throw CorruptData(path.string() + ": float mask with value other than 0 or 1");
    }
  }
  return mask;
}

ProbabilityVolume load_probability(const std::filesystem::path& path) {
  Image img = read(path);
  if (img.grid.channels() != 1) throw ChannelCountError(path.string() + ": probability map must be 3D");
  return ProbabilityVolume(std::move(img.grid));
}

Volume<float> load_float(const std::filesystem::path& path) { return read(path).grid; }

void save(const Volume<float>& volume, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "writer emits native little-endian data");
  write_file(path, header_for(volume.dims(), volume.channels(), volume.geometry(), kFloat32), volume.data().data(), volume.size() * sizeof(float));
}

void save(const PeakVolume& volume, const std::filesystem::path& path) {
  volume.validate();
  save(static_cast<const Volume<float>&>(volume), path);
}

void save(const ProbabilityVolume& volume, const std::filesystem::path& path) {
  volume.validate();
  save(static_cast<const Volume<float>&>(volume), path);
}

void save(const BinaryMask& volume, const std::filesystem::path& path) {
  volume.validate();
  write_file(path, header_for(volume.dims(), 1, volume.geometry(), kUint8), volume.data().data(), volume.size());
}

}  // namespace nifti
}  // namespace bundleseg
