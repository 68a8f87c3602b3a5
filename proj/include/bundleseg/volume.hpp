#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bundleseg/errors.hpp"

namespace bundleseg {

struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

std::string to_string(const Dims3& d);

using Affine = std::array<std::array<float, 4>, 4>;

inline Affine identity_affine() {
  Affine a{};
  for (int i = 0; i < 4; ++i) a[i][i] = 1.0f;
  return a;
}

/// Spatial header fields carried from input to output without interpretation.
struct Geometry {
  std::array<float, 3> voxel_size_mm{1.0f, 1.0f, 1.0f};
  Affine affine = identity_affine();  // sform rows; row 3 is (0,0,0,1)
  short qform_code = 0;
  short sform_code = 1;
  float qfac = 1.0f;
  std::array<float, 3> quatern{0.0f, 0.0f, 0.0f};
  std::array<float, 3> qoffset{0.0f, 0.0f, 0.0f};

  friend bool operator==(const Geometry&, const Geometry&) = default;
};

/// Dense 4D grid indexed (x, y, z, c) with x varying fastest, the NIfTI
/// on-disk order.
template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;
  Volume(Dims3 dims, int channels, T fill = T{})
      : dims_(dims), channels_(channels), data_(dims.voxels() * static_cast<std::size_t>(channels), fill) {
    if (dims.x < 1 || dims.y < 1 || dims.z < 1 || channels < 1) {
      throw ShapeError("volume dims must be positive, got " + to_string(dims) + " x " +
                       std::to_string(channels));
    }
  }

  const Dims3& dims() const { return dims_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int x, int y, int z, int c = 0) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.x) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims_.y) *
                    (static_cast<std::size_t>(z) + static_cast<std::size_t>(dims_.z) * static_cast<std::size_t>(c)));
  }

  T& at(int x, int y, int z, int c = 0) { return data_[index(x, y, z, c)]; }
  const T& at(int x, int y, int z, int c = 0) const { return data_[index(x, y, z, c)]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  Geometry& geometry() { return geometry_; }
  const Geometry& geometry() const { return geometry_; }

 private:
  Dims3 dims_{};
  int channels_ = 0;
  std::vector<T> data_;
  Geometry geometry_{};
};

inline constexpr int kPeakChannels = 9;

/// Three principal fiber directions per voxel: channels 0-2, 3-5, 6-8.
/// A zero 3-vector marks an absent peak.
class PeakVolume : public Volume<float> {
 public:
  PeakVolume() = default;
  explicit PeakVolume(Dims3 dims) : Volume<float>(dims, kPeakChannels) {}
  explicit PeakVolume(Volume<float> grid) : Volume<float>(std::move(grid)) { validate(); }

  void validate() const {
    if (channels() != kPeakChannels) {
      throw ChannelCountError("peak volume needs 9 channels, got " + std::to_string(channels()));
    }
    for (float v : data()) {
      if (!std::isfinite(v)) throw CorruptData("peak volume contains non-finite values");
    }
  }
};

class BinaryMask : public Volume<std::uint8_t> {
 public:
  BinaryMask() = default;
  explicit BinaryMask(Dims3 dims) : Volume<std::uint8_t>(dims, 1) {}
  explicit BinaryMask(Volume<std::uint8_t> grid) : Volume<std::uint8_t>(std::move(grid)) { validate(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data()) n += v;
    return n;
  }

  void validate() const {
    if (channels() != 1) throw ChannelCountError("mask must have one channel");
    for (auto v : data()) {
      if (v > 1) throw CorruptData("mask values must be 0 or 1");
    }
  }
};

class ProbabilityVolume : public Volume<float> {
 public:
  ProbabilityVolume() = default;
  explicit ProbabilityVolume(Dims3 dims) : Volume<float>(dims, 1) {}
  explicit ProbabilityVolume(Volume<float> grid) : Volume<float>(std::move(grid)) { validate(); }

  /// Voxels with probability >= threshold.
  BinaryMask threshold(float level = 0.5f) const {
    BinaryMask mask(dims());
    mask.geometry() = geometry();
    for (std::size_t i = 0; i < size(); ++i) mask.data()[i] = data()[i] >= level ? 1 : 0;
    return mask;
  }

  void validate() const {
    if (channels() != 1) throw ChannelCountError("probability volume must have one channel");
    for (float v : data()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw CorruptData("probability values must lie in [0,1]");
    }
  }
};

}  // namespace bundleseg
