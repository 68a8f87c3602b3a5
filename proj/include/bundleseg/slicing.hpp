#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "bundleseg/unet.hpp"
#include "bundleseg/volume.hpp"

namespace bundleseg::stack {

/// XY slices are indexed by z and laid out (C, X, Y); YZ by x, (C, Y, Z);
/// ZX by y, (C, Z, X).
enum class SlicePlane { XY = 0, YZ = 1, ZX = 2 };

inline constexpr std::array<SlicePlane, 3> kPlanes{SlicePlane::XY, SlicePlane::YZ, SlicePlane::ZX};

std::string_view plane_name(SlicePlane plane);  // "xy", "yz", "zx"
SlicePlane parse_plane(std::string_view name);  // case-insensitive; ConfigError otherwise

struct SliceShape {
  int count = 0;  // number of slices along the plane normal
  int h = 0;
  int w = 0;
};

SliceShape slice_shape(const Dims3& dims, SlicePlane plane);

template <typename T>
struct Slice {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;  // (c, h, w), w fastest
};

/// Copies slice `index` into a (C, dst_h, dst_w) canvas at offset
/// (top, left); the rest of the canvas is left untouched.
template <typename T, typename D>
void copy_slice(const Volume<T>& vol, SlicePlane plane, int index, D* dst, int dst_h, int dst_w, int top = 0,
                int left = 0);

template <typename T>
std::vector<Slice<T>> extract_slices(const Volume<T>& vol, SlicePlane plane);

/// Inverse of extract_slices. Throws ShapeError on a count or shape mismatch.
template <typename T>
Volume<T> reassemble(const std::vector<Slice<T>>& slices, SlicePlane plane, const Dims3& dims);

/// Foreground probability of every voxel from one network applied to the
/// slices of `volume` along `plane` (pad to the 2^depth grid, eval-mode
/// forward, crop). `volume` must already be normalized. When `coverage` is
/// non-null it receives, per voxel, how many network outputs were written
/// to it.
ProbabilityVolume predict_axis(const unet::NetworkParams& params, const Volume<float>& volume, SlicePlane plane,
                               Volume<int>* coverage = nullptr);

}  // namespace bundleseg::stack
