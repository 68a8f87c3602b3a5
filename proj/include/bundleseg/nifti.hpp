#pragma once

#include <cstdint>
#include <filesystem>

#include "bundleseg/volume.hpp"

namespace bundleseg::nifti {

// NIfTI-1 datatype codes handled here.
inline constexpr short kUint8 = 2;
inline constexpr short kInt16 = 4;
inline constexpr short kFloat32 = 16;

inline constexpr int kHeaderSize = 348;
inline constexpr int kDataOffset = 352;  // header + 4-byte extension flag

/// Raw contents of a single-file NIfTI-1 image, values converted to float
/// with scl_slope/scl_inter applied. `.nii.gz` is detected from content.
struct Image {
  Volume<float> grid;
  short datatype = kFloat32;
};

Image read(const std::filesystem::path& path);

PeakVolume load_peaks(const std::filesystem::path& path);
/// uint8/int16 voxels become 1 when nonzero; float voxels must already be 0 or 1.
BinaryMask load_mask(const std::filesystem::path& path);
ProbabilityVolume load_probability(const std::filesystem::path& path);
/// Any channel count; used for fusion inputs and generic float grids.
Volume<float> load_float(const std::filesystem::path& path);

/// Written gzip-compressed when the path ends in ".gz".
void save(const PeakVolume& volume, const std::filesystem::path& path);
void save(const ProbabilityVolume& volume, const std::filesystem::path& path);
void save(const BinaryMask& volume, const std::filesystem::path& path);
void save(const Volume<float>& volume, const std::filesystem::path& path);

}  // namespace bundleseg::nifti
