#include "bundleseg/slicing.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>

namespace bundleseg::stack {

std::string_view plane_name(SlicePlane plane) {
  switch (plane) {
    case SlicePlane::XY:
      return "xy";
    case SlicePlane::YZ:
      return "yz";
    case SlicePlane::ZX:
      return "zx";
  }
  return "?";
}

SlicePlane parse_plane(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  for (SlicePlane p : kPlanes) {
    if (lower == plane_name(p)) return p;
  }
  throw ConfigError("unknown slice plane '" + std::string(name) + "' (expected xy, yz or zx)");
}

SliceShape slice_shape(const Dims3& d, SlicePlane plane) {
  switch (plane) {
    case SlicePlane::XY:
      return {d.z, d.x, d.y};
    case SlicePlane::YZ:
      return {d.x, d.y, d.z};
    case SlicePlane::ZX:
      return {d.y, d.z, d.x};
  }
  return {};
}

namespace {

// Volume coordinates of in-slice position (i, j) on slice `index`.
inline void to_volume(SlicePlane plane, int index, int i, int j, int& x, int& y, int& z) {
  x = y = z = 0;
  switch (plane) {
    case SlicePlane::XY:
      x = i, y = j, z = index;
      break;
    case SlicePlane::YZ:
      x = index, y = i, z = j;
      break;
    case SlicePlane::ZX:
      x = j, y = index, z = i;
      break;
  }
}

}  // namespace

template <typename T, typename D>
void copy_slice(const Volume<T>& vol, SlicePlane plane, int index, D* dst, int dst_h, int dst_w, int top, int left) {
  const SliceShape s = slice_shape(vol.dims(), plane);
  if (index < 0 || index >= s.count || top + s.h > dst_h || left + s.w > dst_w) {
    throw ShapeError("slice does not fit its destination");
  }
  for (int c = 0; c < vol.channels(); ++c) {
    D* plane_out = dst + static_cast<std::size_t>(c) * dst_h * dst_w;
    for (int i = 0; i < s.h; ++i) {
      D* row = plane_out + static_cast<std::size_t>(i + top) * dst_w + left;
      for (int j = 0; j < s.w; ++j) {
        int x, y, z;
        to_volume(plane, index, i, j, x, y, z);
        row[j] = static_cast<D>(vol.at(x, y, z, c));
      }
    }
  }
}

template <typename T>
std::vector<Slice<T>> extract_slices(const Volume<T>& vol, SlicePlane plane) {
  const SliceShape s = slice_shape(vol.dims(), plane);
  std::vector<Slice<T>> out(static_cast<std::size_t>(s.count));
  for (int k = 0; k < s.count; ++k) {
    Slice<T>& sl = out[k];
    sl.c = vol.channels();
    sl.h = s.h;
    sl.w = s.w;
    sl.data.resize(static_cast<std::size_t>(sl.c) * s.h * s.w);
    copy_slice(vol, plane, k, sl.data.data(), s.h, s.w);
  }
  return out;
}

template <typename T>
Volume<T> reassemble(const std::vector<Slice<T>>& slices, SlicePlane plane, const Dims3& dims) {
  const SliceShape s = slice_shape(dims, plane);
  if (static_cast<int>(slices.size()) != s.count) {
    throw ShapeError("reassemble: expected " + std::to_string(s.count) + " slices for plane " +
                     std::string(plane_name(plane)) + ", got " + std::to_string(slices.size()));
  }
  if (slices.empty()) throw ShapeError("reassemble: no slices");
  const int channels = slices.front().c;
  Volume<T> vol(dims, channels);
  for (int k = 0; k < s.count; ++k) {
    const Slice<T>& sl = slices[k];
    if (sl.c != channels || sl.h != s.h || sl.w != s.w ||
        sl.data.size() != static_cast<std::size_t>(channels) * s.h * s.w) {
      throw ShapeError("reassemble: slice " + std::to_string(k) + " has the wrong shape");
    }
    for (int c = 0; c < channels; ++c) {
      const T* src = sl.data.data() + static_cast<std::size_t>(c) * s.h * s.w;
      for (int i = 0; i < s.h; ++i) {
        for (int j = 0; j < s.w; ++j) {
          int x, y, z;
          to_volume(plane, k, i, j, x, y, z);
          vol.at(x, y, z, c) = src[static_cast<std::size_t>(i) * s.w + j];
        }
      }
    }
  }
  return vol;
}

ProbabilityVolume predict_axis(const unet::NetworkParams& params, const Volume<float>& volume, SlicePlane plane,
                               Volume<int>* coverage) {
  const auto& cfg = params.config;
  if (volume.channels() != cfg.in_channels) {
    throw ShapeError("network expects " + std::to_string(cfg.in_channels) + " channels, volume has " +
                     std::to_string(volume.channels()));
  }
  const SliceShape s = slice_shape(volume.dims(), plane);
  const auto [top, bottom] = unet::grid_padding(s.h, cfg.depth);
  const auto [left, right] = unet::grid_padding(s.w, cfg.depth);
  const unet::PadRecord pad{top, bottom, left, right};
  const int hp = s.h + top + bottom;
  const int wp = s.w + left + right;

  ProbabilityVolume out(volume.dims());
  out.geometry() = volume.geometry();
  if (coverage != nullptr) *coverage = Volume<int>(volume.dims(), 1);

  constexpr int kBatch = 8;
  for (int first = 0; first < s.count; first += kBatch) {
    const int n = std::min(kBatch, s.count - first);
    Tensor4<float> x(n, cfg.in_channels, hp, wp);
    for (int b = 0; b < n; ++b) copy_slice(volume, plane, first + b, x.item(b), hp, wp, top, left);
    const Tensor4<float> probs = unet::crop(unet::forward(params, x, ops::Mode::Eval), pad);
    for (int b = 0; b < n; ++b) {
      for (int i = 0; i < s.h; ++i) {
        for (int j = 0; j < s.w; ++j) {
          int vx, vy, vz;
          to_volume(plane, first + b, i, j, vx, vy, vz);
          out.at(vx, vy, vz) = std::clamp(probs(b, 1, i, j), 0.0f, 1.0f);
          if (coverage != nullptr) ++coverage->at(vx, vy, vz);
        }
      }
    }
  }
  return out;
}

template void copy_slice(const Volume<float>&, SlicePlane, int, float*, int, int, int, int);
template void copy_slice(const Volume<std::uint8_t>&, SlicePlane, int, float*, int, int, int, int);
template void copy_slice(const Volume<std::uint8_t>&, SlicePlane, int, std::uint8_t*, int, int, int, int);
template std::vector<Slice<float>> extract_slices(const Volume<float>&, SlicePlane);
template std::vector<Slice<std::uint8_t>> extract_slices(const Volume<std::uint8_t>&, SlicePlane);
template std::vector<Slice<int>> extract_slices(const Volume<int>&, SlicePlane);
template Volume<float> reassemble(const std::vector<Slice<float>>&, SlicePlane, const Dims3&);
template Volume<std::uint8_t> reassemble(const std::vector<Slice<std::uint8_t>>&, SlicePlane, const Dims3&);
template Volume<int> reassemble(const std::vector<Slice<int>>&, SlicePlane, const Dims3&);

}  // namespace bundleseg::stack
