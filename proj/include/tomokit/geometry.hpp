#pragma once

// Acquisition geometry, poses, detector sampling and ray generation.
//
// Frame: right-handed, isocenter at the origin, z vertical. The source for
// pose (theta, phi) sits at d1 * (sin(theta)cos(phi), -cos(theta)cos(phi), sin(phi)),
// so theta = phi = 0 is the anterior-posterior view with the source at
// (0, -d1, 0). The detector is the plane perpendicular to the source-origin
// axis at distance d2 from the source. Its u axis is the horizontal tangent
// of the rotation circle, its v axis completes the frame (vertical at phi = 0).
// Detector row 0 is the top row (largest v).

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "tomokit/core.hpp"

namespace tomokit {

using Vec3 = Eigen::Vector3d;

struct Pose {
  double theta = 0.0;  // azimuth about z, radians, [0, 2pi)
  double phi = 0.0;    // elevation, radians, [-pi/2, pi/2]

  static Pose make(double theta, double phi) {
    if (!std::isfinite(theta) || !std::isfinite(phi))
      throw InvalidArgument("pose angles must be finite");
    if (phi < -kPi / 2 - 1e-12 || phi > kPi / 2 + 1e-12)
      throw InvalidArgument("pose elevation outside [-90, 90] degrees");
    double t = std::fmod(theta, 2.0 * kPi);
    if (t < 0.0) t += 2.0 * kPi;
    if (t >= 2.0 * kPi) t = 0.0;
    return Pose{t, std::clamp(phi, -kPi / 2, kPi / 2)};
  }

  static Pose from_degrees(double theta_deg, double phi_deg) {
    return make(theta_deg * kPi / 180.0, phi_deg * kPi / 180.0);
  }

  double theta_deg() const { return theta * 180.0 / kPi; }
  double phi_deg() const { return phi * 180.0 / kPi; }
};

struct Geometry {
  double d1_mm = 1000.0;  // source to isocenter
  double d2_mm = 1500.0;  // source to detector
  int det_nu = 128;       // columns
  int det_nv = 128;       // rows; 1 means fan beam
  double du_mm = 1.0;
  double dv_mm = 1.0;

  void validate() const {
    if (!(d1_mm > 0.0) || !(d2_mm > d1_mm))
      throw InvalidArgument("geometry requires d2 > d1 > 0");
    if (det_nu < 1 || det_nv < 1) throw InvalidArgument("detector needs at least one pixel per axis");
    if (!(du_mm > 0.0) || !(dv_mm > 0.0)) throw InvalidArgument("pixel pitch must be positive");
  }

  double magnification() const { return d2_mm / d1_mm; }
  bool is_fan_beam() const { return det_nv == 1; }
  bool operator==(const Geometry&) const = default;
};

/// Axis-aligned box, used as the support of a volume or image.
struct Box {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);

  static Box centered(const Vec3& extent) { return Box{-0.5 * extent, 0.5 * extent}; }
  Vec3 center() const { return 0.5 * (lo + hi); }
  Vec3 half_extent() const { return 0.5 * (hi - lo); }
  double diagonal() const { return (hi - lo).norm(); }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitY();
  double t_near = 0.0;
  double t_far = 0.0;
  // Stream key for stratified jitter. Derived from the continuous detector
  // coordinate so the same pixel gets the same jitter in full and patch renders.
  std::uint64_t key = 0;

  bool empty() const { return !(t_far > t_near); }
  Vec3 at(double t) const { return origin + t * direction; }
  double length() const { return t_far - t_near; }
};

struct DetectorFrame {
  Vec3 source;
  Vec3 axis;    // unit, source towards isocenter
  Vec3 center;  // detector center
  Vec3 eu;      // unit, column direction
  Vec3 ev;      // unit, upward row direction
};

inline Vec3 source_position(const Geometry& g, const Pose& p) {
  const double c = std::cos(p.phi);
  return g.d1_mm * Vec3(std::sin(p.theta) * c, -std::cos(p.theta) * c, std::sin(p.phi));
}

inline DetectorFrame detector_frame(const Geometry& g, const Pose& p) {
  DetectorFrame f;
  f.source = source_position(g, p);
  f.axis = -f.source / g.d1_mm;
  f.center = f.source + g.d2_mm * f.axis;
  f.eu = Vec3(std::cos(p.theta), std::sin(p.theta), 0.0);
  f.ev = f.eu.cross(f.axis);
  return f;
}

/// Point on the detector at continuous pixel coordinates (row, col). Integer
/// coordinates are pixel centers.
inline Vec3 detector_point(const Geometry& g, const DetectorFrame& f, double row, double col) {
  const double u = (col - 0.5 * (g.det_nu - 1)) * g.du_mm;
  const double v = (0.5 * (g.det_nv - 1) - row) * g.dv_mm;
  return f.center + u * f.eu + v * f.ev;
}

inline Vec3 detector_pixel_center(const Geometry& g, const Pose& p, int row, int col) {
  if (row < 0 || row >= g.det_nv || col < 0 || col >= g.det_nu)
    throw InvalidArgument("detector index (" + std::to_string(row) + ", " + std::to_string(col) +
                          ") out of range");
  return detector_point(g, detector_frame(g, p), row, col);
}

/// Slab intersection of the half-line origin + t*dir (t >= 0) with the box.
/// Returns false when the ray misses.
inline bool intersect_box(const Vec3& origin, const Vec3& dir, const Box& box, double& t_near,
                          double& t_far) {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (origin[a] < box.lo[a] || origin[a] > box.hi[a]) return false;
      continue;
    }
    const double inv = 1.0 / dir[a];
    double t0 = (box.lo[a] - origin[a]) * inv;
    double t1 = (box.hi[a] - origin[a]) * inv;
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
    if (lo > hi) return false;
  }
  t_near = lo;
  t_far = hi;
  return true;
}

inline std::uint64_t coordinate_key(double row, double col) {
  std::uint64_t a = 0, b = 0;
  std::memcpy(&a, &row, sizeof a);
  std::memcpy(&b, &col, sizeof b);
  return hash_combine(splitmix64(a), b);
}

/// Ray from `origin` through `target`, clipped to `box`. Misses become empty
/// rays with t_near == t_far == 0.
inline Ray make_ray(const Vec3& origin, const Vec3& target, const Box& box, std::uint64_t key = 0) {
  Ray r;
  r.origin = origin;
  r.direction = (target - origin).normalized();
  r.key = key;
  double tn = 0.0, tf = 0.0;
  if (intersect_box(r.origin, r.direction, box, tn, tf) && tf > tn) {
    r.t_near = tn;
    r.t_far = tf;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Patches.

/// Square patch of `size` x `size` detector samples. `u` is the patch center
/// in the normalized detector domain [0,1]^2 (u[0] along columns, u[1] along
/// rows); `scale` stretches the sample spacing in units of detector pixels.
struct PatchSpec {
  double u[2] = {0.5, 0.5};
  double scale = 1.0;
  int size = 32;
};

/// Largest admissible patch scale, min(nu, nv) / m. Kept real valued.
inline double max_patch_scale(const Geometry& g, int m) {
  return static_cast<double>(std::min(g.det_nu, g.det_nv)) / m;
}

inline bool patch_fits(const Geometry& g, const PatchSpec& p) {
  if (p.size < 1 || !(p.scale >= 1.0 - 1e-12)) return false;
  const double half = 0.5 * p.size * p.scale;
  const double cx = p.u[0] * g.det_nu;
  const double cy = p.u[1] * g.det_nv;
  constexpr double tol = 1e-9;
  return cx - half >= -tol && cx + half <= g.det_nu + tol && cy - half >= -tol &&
         cy + half <= g.det_nv + tol;
}

/// Continuous detector coordinates (row, col) of patch sample (a, b).
inline std::pair<double, double> patch_sample_coords(const Geometry& g, const PatchSpec& p, int a,
                                                     int b) {
  const double off = 0.5 * (p.size - 1);
  const double row = p.u[1] * g.det_nv + (a - off) * p.scale - 0.5;
  const double col = p.u[0] * g.det_nu + (b - off) * p.scale - 0.5;
  return {row, col};
}

/// One ray per patch sample, row-major, all starting at the source.
inline std::vector<Ray> rays_for_patch(const Geometry& g, const Pose& pose, const PatchSpec& patch,
                                       const Box& box) {
  if (!patch_fits(g, patch)) throw InvalidArgument("patch does not fit on the detector");
  const DetectorFrame f = detector_frame(g, pose);
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(patch.size) * patch.size);
  for (int a = 0; a < patch.size; ++a) {
    for (int b = 0; b < patch.size; ++b) {
      const auto [row, col] = patch_sample_coords(g, patch, a, b);
      rays.push_back(make_ray(f.source, detector_point(g, f, row, col), box, coordinate_key(row, col)));
    }
  }
  return rays;
}

/// det_nv x det_nu rays, row-major.
inline std::vector<Ray> rays_full(const Geometry& g, const Pose& pose, const Box& box) {
  const DetectorFrame f = detector_frame(g, pose);
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(g.det_nu) * g.det_nv);
  for (int i = 0; i < g.det_nv; ++i) {
    for (int j = 0; j < g.det_nu; ++j) {
      const double row = i, col = j;
      rays.push_back(make_ray(f.source, detector_point(g, f, row, col), box, coordinate_key(row, col)));
    }
  }
  return rays;
}

/// Draws s ~ U[1, S_max] and then the center uniformly over the positions
/// where the scaled patch stays on the detector.
inline PatchSpec sample_patch_spec(std::mt19937_64& rng, int m, const Geometry& g) {
  if (m < 1 || m > std::min(g.det_nu, g.det_nv))
    throw InvalidArgument("patch size " + std::to_string(m) + " larger than the detector");
  PatchSpec p;
  p.size = m;
  const double smax = max_patch_scale(g, m);
  p.scale = uniform(rng, 1.0, smax);
  const int dims[2] = {g.det_nu, g.det_nv};
  for (int k = 0; k < 2; ++k) {
    const double margin = std::min(0.5, 0.5 * m * p.scale / dims[k]);
    p.u[k] = uniform(rng, margin, 1.0 - margin);
  }
  return p;
}

/// View presets for the view-count study: AP; AP + lateral; every 72 degrees;
/// every 36 degrees. All start at the AP view.
inline std::vector<Pose> view_preset(int n) {
  std::vector<Pose> poses;
  switch (n) {
    case 1:
      poses.push_back(Pose::from_degrees(0, 0));
      break;
    case 2:
      poses.push_back(Pose::from_degrees(0, 0));
      poses.push_back(Pose::from_degrees(90, 0));
      break;
    case 5:
    case 10:
      for (int k = 0; k < n; ++k) poses.push_back(Pose::from_degrees(360.0 / n * k, 0));
      break;
    default:
      throw InvalidArgument("view preset must be one of 1, 2, 5, 10");
  }
  return poses;
}

}  // namespace tomokit
