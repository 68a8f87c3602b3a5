#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "bundleseg/volume.hpp"

namespace bundleseg::phantom {

using Vec3 = std::array<double, 3>;

/// Synthetic tract: a tube around a quarter-circle arc
///   c(t) = center + R (cos t * u + sin t * v),  t in [0, pi/2],
///   u = (1, 0, 0),  v = (0, cos tilt, sin tilt),
/// so the arc leaves every axis-aligned plane. Voxel (x, y, z) sits at the
/// point (x, y, z).
struct PhantomSpec {
  int dim = 64;
  double tube_radius = 3.0;
  Vec3 arc_center{};
  double arc_radius = 0.0;
  double arc_tilt = 0.7853981633974483;  // pi/4
  double peak_noise_sigma = 0.05;
  double distractor_density = 0.3;
  bool crossing_sheet = true;
  double sheet_half_thickness = 2.0;
  Vec3 sheet_direction{0.7071067811865476, 0.7071067811865476, 0.0};
  std::uint64_t seed = 1;

  /// Arc radius 0.55*dim, centred so the arc's bounding box sits in the
  /// middle of the grid.
  static PhantomSpec defaults(int dim = 64);
  /// Places arc_center so the arc's bounding box is centred in the grid.
  void center_arc();

  Vec3 u() const { return {1.0, 0.0, 0.0}; }
  Vec3 v() const;
  Vec3 point(double t) const;
  Vec3 tangent(double t) const;
  /// Horizontal slab through the arc's midpoint height, |z - z_mid| <= half thickness.
  double sheet_z() const;
  void validate() const;
};

struct Closest {
  double distance = 0.0;
  double t = 0.0;  // arc parameter of the closest point
};

/// Exact distance from p to the continuous arc.
Closest closest_on_arc(const PhantomSpec& spec, const Vec3& p);

struct Phantom {
  PeakVolume peaks;
  BinaryMask mask;
};

/// Mask: voxels within tube_radius of the arc. Inside: peak 1 is the arc
/// tangent plus N(0, sigma^2) per component, renormalised; peak 2 carries
/// the sheet direction where the tube crosses the sheet. Outside: sheet
/// voxels carry the sheet direction as peak 1; other voxels get a random
/// unit peak 1 with probability distractor_density.
Phantom generate(const PhantomSpec& spec);

/// Per-subject variation of a base spec: centre offset by U(-0.1, 0.1)*dim
/// per axis (clamped to keep the tube inside), arc radius scaled by
/// U(0.9, 1.1), tube radius by U(0.8, 1.2). Uses `seed` for both the jitter
/// and the generated volume.
PhantomSpec jitter_spec(const PhantomSpec& base, std::uint64_t seed);

/// n subjects, subject i generated from jitter_spec(base, seed + i).
std::vector<Phantom> generate_dataset(int n, const PhantomSpec& base, std::uint64_t seed);

}  // namespace bundleseg::phantom
