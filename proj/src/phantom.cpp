#include "bundleseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "bundleseg/rng.hpp"

namespace bundleseg::phantom {
namespace {

constexpr double kQuarter = std::numbers::pi / 2.0;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

double distance(const Vec3& a, const Vec3& b) { return norm({a[0] - b[0], a[1] - b[1], a[2] - b[2]}); }

// Extremes over t in [0, pi/2] of A cos t + B sin t.
std::pair<double, double> arc_extent(double a, double b) {
  double lo = std::min(a, b);
  double hi = std::max(a, b);
  const double t = std::atan2(b, a);
  if (t > 0.0 && t < kQuarter) {
    const double peak = std::hypot(a, b);
    hi = std::max(hi, peak);
  }
  const double t2 = std::atan2(-b, -a);
  if (t2 > 0.0 && t2 < kQuarter) lo = std::min(lo, -std::hypot(a, b));
  return {lo, hi};
}

Vec3 random_unit(SplitMix64& rng) {
  for (;;) {
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(d);
    if (n > 1e-6) return {d[0] / n, d[1] / n, d[2] / n};
  }
}

void set_peak(PeakVolume& vol, int x, int y, int z, int peak, const Vec3& d) {
  for (int k = 0; k < 3; ++k) vol.at(x, y, z, 3 * peak + k) = static_cast<float>(d[k]);
}

}  // namespace

PhantomSpec PhantomSpec::defaults(int dim) {
  PhantomSpec s;
  s.dim = dim;
  s.arc_radius = 0.55 * dim;
  s.center_arc();
  return s;
}

void PhantomSpec::center_arc() {
  const double span = dim - 1;
  const Vec3 vv = v();
  for (int i = 0; i < 3; ++i) {
    const auto [lo, hi] = arc_extent(arc_radius * u()[i], arc_radius * vv[i]);
    arc_center[i] = 0.5 * (span - lo - hi);
  }
}

Vec3 PhantomSpec::v() const { return {0.0, std::cos(arc_tilt), std::sin(arc_tilt)}; }

Vec3 PhantomSpec::point(double t) const {
  const Vec3 uu = u();
  const Vec3 vv = v();
  Vec3 p;
  for (int i = 0; i < 3; ++i) p[i] = arc_center[i] + arc_radius * (std::cos(t) * uu[i] + std::sin(t) * vv[i]);
  return p;
}

Vec3 PhantomSpec::tangent(double t) const {
  const Vec3 uu = u();
  const Vec3 vv = v();
  Vec3 d;
  for (int i = 0; i < 3; ++i) d[i] = -std::sin(t) * uu[i] + std::cos(t) * vv[i];
  return d;
}

double PhantomSpec::sheet_z() const { return point(kQuarter / 2.0)[2]; }

void PhantomSpec::validate() const {
  if (dim < 4) throw SpecError("phantom dim must be >= 4");
  if (!(tube_radius > 0.0)) throw SpecError("tube radius must be positive");
  if (!(arc_radius > 0.0)) throw SpecError("arc radius must be positive");
  if (!(distractor_density > 0.0 && distractor_density < 1.0)) {
    throw SpecError("distractor density must lie in (0, 1)");
  }
  if (!(peak_noise_sigma >= 0.0)) throw SpecError("peak noise sigma must be >= 0");
  if (!(sheet_half_thickness >= 0.0)) throw SpecError("sheet half thickness must be >= 0");
  if (std::abs(norm(sheet_direction) - 1.0) > 1e-6) throw SpecError("sheet direction must be a unit vector");
  const Vec3 vv = v();
  for (int i = 0; i < 3; ++i) {
    const auto [lo, hi] = arc_extent(arc_radius * u()[i], arc_radius * vv[i]);
    if (arc_center[i] + lo - tube_radius < 0.0 || arc_center[i] + hi + tube_radius > dim - 1) {
      throw SpecError("tube leaves the grid along axis " + std::to_string(i));
    }
  }
}

Closest closest_on_arc(const PhantomSpec& spec, const Vec3& p) {
  const Vec3 q{p[0] - spec.arc_center[0], p[1] - spec.arc_center[1], p[2] - spec.arc_center[2]};
  const Vec3 uu = spec.u();
  const Vec3 vv = spec.v();
  const double a = dot(q, uu);
  const double b = dot(q, vv);
  const double h = dot(q, cross(uu, vv));
  const double theta = std::atan2(b, a);
  if (theta >= 0.0 && theta <= kQuarter) {
    const double radial = std::hypot(a, b) - spec.arc_radius;
    return {std::sqrt(h * h + radial * radial), theta};
  }
  // Outside the arc's angular range the closest point is an endpoint.
  const double d0 = distance(p, spec.point(0.0));
  const double d1 = distance(p, spec.point(kQuarter));
  return d0 <= d1 ? Closest{d0, 0.0} : Closest{d1, kQuarter};
}

Phantom generate(const PhantomSpec& spec) {
  spec.validate();
  const Dims3 dims{spec.dim, spec.dim, spec.dim};
  Phantom ph{PeakVolume(dims), BinaryMask(dims)};
  SplitMix64 rng(derive_seed(spec.seed, 0));
  const double sheet_z = spec.sheet_z();
  for (int z = 0; z < spec.dim; ++z) {
    const bool in_sheet = spec.crossing_sheet && std::abs(z - sheet_z) <= spec.sheet_half_thickness;
    for (int y = 0; y < spec.dim; ++y) {
      for (int x = 0; x < spec.dim; ++x) {
        const Closest c = closest_on_arc(spec, {double(x), double(y), double(z)});
        if (c.distance <= spec.tube_radius) {
          ph.mask.at(x, y, z) = 1;
          const Vec3 t = spec.tangent(c.t);
          Vec3 d{t[0] + spec.peak_noise_sigma * rng.normal(), t[1] + spec.peak_noise_sigma * rng.normal(),
                 t[2] + spec.peak_noise_sigma * rng.normal()};
          const double n = norm(d);
          set_peak(ph.peaks, x, y, z, 0, {d[0] / n, d[1] / n, d[2] / n});
          if (in_sheet) set_peak(ph.peaks, x, y, z, 1, spec.sheet_direction);
        } else if (in_sheet) {
          set_peak(ph.peaks, x, y, z, 0, spec.sheet_direction);
        } else if (rng.uniform() < spec.distractor_density) {
          set_peak(ph.peaks, x, y, z, 0, random_unit(rng));
        }
      }
    }
  }
  return ph;
}

PhantomSpec jitter_spec(const PhantomSpec& base, std::uint64_t seed) {
  SplitMix64 rng(derive_seed(seed, 1));
  PhantomSpec s = base;
  s.seed = seed;
  Vec3 offset;
  for (auto& o : offset) o = rng.uniform(-0.1, 0.1) * base.dim;
  s.arc_radius = base.arc_radius * rng.uniform(0.9, 1.1);
  s.tube_radius = base.tube_radius * rng.uniform(0.8, 1.2);
  const Vec3 vv = s.v();
  for (int i = 0; i < 3; ++i) {
    const auto [lo, hi] = arc_extent(s.arc_radius * s.u()[i], s.arc_radius * vv[i]);
    const double min_c = s.tube_radius - lo;
    const double max_c = (s.dim - 1) - s.tube_radius - hi;
    if (min_c > max_c) throw SpecError("jittered tube cannot fit inside the grid");
    s.arc_center[i] = std::clamp(base.arc_center[i] + offset[i], min_c, max_c);
  }
  return s;
}

std::vector<Phantom> generate_dataset(int n, const PhantomSpec& base, std::uint64_t seed) {
  if (n < 1) throw SpecError("dataset size must be >= 1");
  std::vector<Phantom> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(generate(jitter_spec(base, seed + static_cast<std::uint64_t>(i))));
  return out;
}

}  // namespace bundleseg::phantom
