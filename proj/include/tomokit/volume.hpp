#pragma once

// Voxel and pixel containers plus synthetic phantom generators.
//
// Index conventions: a Volume is (D, H, W) with W fastest. Voxel (k, i, j)
// has its center at x = (j - (W-1)/2) sx, y = (i - (H-1)/2) sy,
// z = (k - (D-1)/2) sz, so every container is centered on the isocenter.
// Image2 is the D = 1 slice of the same convention in the z = 0 plane.

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tomokit/core.hpp"
#include "tomokit/geometry.hpp"

namespace tomokit {

struct Volume {
  std::array<int, 3> dims{0, 0, 0};            // D, H, W
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm, same order
  std::vector<double> data;

  static Volume zeros(std::array<int, 3> dims, std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
    for (int d : dims)
      if (d < 1) throw InvalidArgument("volume dimensions must be positive");
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    v.data.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], 0.0);
    return v;
  }

  std::size_t size() const { return data.size(); }
  int depth() const { return dims[0]; }
  int height() const { return dims[1]; }
  int width() const { return dims[2]; }

  std::size_t index(int k, int i, int j) const {
    return (static_cast<std::size_t>(k) * dims[1] + i) * dims[2] + j;
  }
  double& at(int k, int i, int j) { return data[index(k, i, j)]; }
  double at(int k, int i, int j) const { return data[index(k, i, j)]; }

  Vec3 voxel_center(int k, int i, int j) const {
    return Vec3((j - 0.5 * (dims[2] - 1)) * spacing[2], (i - 0.5 * (dims[1] - 1)) * spacing[1],
                (k - 0.5 * (dims[0] - 1)) * spacing[0]);
  }

  /// Physical support (voxel edges), centered at the origin.
  Box bounds() const {
    return Box::centered(Vec3(dims[2] * spacing[2], dims[1] * spacing[1], dims[0] * spacing[0]));
  }
};

struct Image2 {
  int height = 0;
  int width = 0;
  std::array<double, 2> spacing{1.0, 1.0};  // mm, (row, col)
  std::vector<double> data;

  static Image2 zeros(int h, int w, std::array<double, 2> spacing = {1.0, 1.0}) {
    if (h < 1 || w < 1) throw InvalidArgument("image dimensions must be positive");
    Image2 img;
    img.height = h;
    img.width = w;
    img.spacing = spacing;
    img.data.assign(static_cast<std::size_t>(h) * w, 0.0);
    return img;
  }

  std::size_t size() const { return data.size(); }
  double& at(int i, int j) { return data[static_cast<std::size_t>(i) * width + j]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(i) * width + j]; }
  bool same_shape(const Image2& o) const { return height == o.height && width == o.width; }

  /// Support in the z = 0 plane, thin in z.
  Box bounds() const {
    return Box::centered(Vec3(width * spacing[1], height * spacing[0], 1.0));
  }
};

/// Named per-material fraction maps (2D). Air, when present, holds the
/// remainder so that fractions sum to one.
struct MaterialMaps {
  std::vector<std::string> names;
  std::vector<Image2> maps;

  std::size_t count() const { return names.size(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    return std::nullopt;
  }

  const Image2& get(const std::string& name) const {
    const auto i = find(name);
    if (!i) throw InvalidArgument("no material map named '" + name + "'");
    return maps[*i];
  }
};

enum class SinoStage { line_integral, transmission, log_transmission };

inline const char* to_string(SinoStage s) {
  switch (s) {
    case SinoStage::line_integral: return "line_integral";
    case SinoStage::transmission: return "transmission";
    case SinoStage::log_transmission: return "log_transmission";
  }
  return "?";
}

inline SinoStage parse_stage(const std::string& s) {
  if (s == "line_integral") return SinoStage::line_integral;
  if (s == "transmission") return SinoStage::transmission;
  if (s == "log_transmission") return SinoStage::log_transmission;
  throw FormatError("unknown sinogram stage '" + s + "'");
}

/// Fan-beam sinogram: one row per view, one column per detector bin.
struct Sinogram {
  int n_views = 0;
  int n_det = 0;
  std::vector<double> angles;  // radians, strictly increasing in [0, 2pi)
  SinoStage stage = SinoStage::line_integral;
  Geometry geometry;
  std::vector<double> data;

  static Sinogram zeros(const Geometry& g, std::vector<double> angles, SinoStage stage) {
    Sinogram s;
    s.n_views = static_cast<int>(angles.size());
    s.n_det = g.det_nu;
    s.angles = std::move(angles);
    s.stage = stage;
    s.geometry = g;
    s.data.assign(static_cast<std::size_t>(s.n_views) * s.n_det, 0.0);
    return s;
  }

  std::span<double> view(int v) {
    return {data.data() + static_cast<std::size_t>(v) * n_det, static_cast<std::size_t>(n_det)};
  }
  std::span<const double> view(int v) const {
    return {data.data() + static_cast<std::size_t>(v) * n_det, static_cast<std::size_t>(n_det)};
  }
  double& at(int v, int d) { return data[static_cast<std::size_t>(v) * n_det + d]; }
  double at(int v, int d) const { return data[static_cast<std::size_t>(v) * n_det + d]; }

  bool same_shape(const Sinogram& o) const { return n_views == o.n_views && n_det == o.n_det; }

  void validate() const {
    if (n_views < 1 || n_det < 1) throw InvalidArgument("sinogram must be non-empty");
    if (static_cast<int>(angles.size()) != n_views) throw InvalidArgument("angle count != n_views");
    if (data.size() != static_cast<std::size_t>(n_views) * n_det)
      throw InvalidArgument("sinogram payload size mismatch");
    for (int v = 0; v < n_views; ++v) {
      if (angles[v] < 0.0 || angles[v] >= 2.0 * kPi)
        throw InvalidArgument("sinogram angles must lie in [0, 2pi)");
      if (v > 0 && !(angles[v] > angles[v - 1]))
        throw InvalidArgument("sinogram angles must be strictly increasing");
    }
  }
};

/// n angles uniformly covering [0, 2pi), starting at 0.
inline std::vector<double> uniform_angles(int n) {
  if (n < 1) throw InvalidArgument("need at least one view");
  std::vector<double> a(n);
  for (int k = 0; k < n; ++k) a[k] = 2.0 * kPi * k / n;
  return a;
}

// ---------------------------------------------------------------------------
// Phantoms.

/// Axis-aligned ellipsoid in world millimetres. Non-additive entries overwrite
/// earlier values; additive ones accumulate.
struct Ellipsoid {
  Vec3 center = Vec3::Zero();
  Vec3 semi_axes = Vec3::Ones();
  double value = 1.0;
  bool additive = false;
};

namespace detail {
inline void check_semi_axes(const Vec3& a) {
  for (int k = 0; k < 3; ++k)
    if (!(a[k] > 0.0)) throw InvalidArgument("ellipsoid semi-axes must be positive");
}

inline bool inside(const Ellipsoid& e, const Vec3& p) {
  const Vec3 q = (p - e.center).cwiseQuotient(e.semi_axes);
  return q.squaredNorm() <= 1.0;
}
}  // namespace detail

/// Evaluates the ellipsoid list at voxel centers (supersample == 1) or as the
/// mean over a supersample^3 sub-grid per voxel, then clamps to [0, 1].
inline Volume make_ellipsoid_phantom(std::span<const Ellipsoid> spec, std::array<int, 3> dims,
                                     std::array<double, 3> spacing = {1.0, 1.0, 1.0},
                                     int supersample = 1) {
  if (spec.empty()) throw InvalidArgument("phantom spec is empty");
  if (supersample < 1) throw InvalidArgument("supersample must be >= 1");
  for (const auto& e : spec) detail::check_semi_axes(e.semi_axes);
  Volume v = Volume::zeros(dims, spacing);
  const int ss = supersample;
  const double inv = 1.0 / (static_cast<double>(ss) * ss * ss);
  parallel_for(static_cast<std::size_t>(dims[0]), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    for (int i = 0; i < dims[1]; ++i) {
      for (int j = 0; j < dims[2]; ++j) {
        const Vec3 c = v.voxel_center(k, i, j);
        double acc = 0.0;
        for (int a = 0; a < ss; ++a)
          for (int b = 0; b < ss; ++b)
            for (int d = 0; d < ss; ++d) {
              const Vec3 p = c + Vec3(((d + 0.5) / ss - 0.5) * spacing[2],
                                      ((b + 0.5) / ss - 0.5) * spacing[1],
                                      ((a + 0.5) / ss - 0.5) * spacing[0]);
              double val = 0.0;
              for (const auto& e : spec) {
                if (!detail::inside(e, p)) continue;
                val = e.additive ? val + e.value : e.value;
              }
              acc += std::clamp(val, 0.0, 1.0);
            }
        v.at(k, i, j) = acc * inv;
      }
    }
  });
  return v;
}

/// 2D ellipse (optionally rotated by `angle` radians) in the z = 0 plane.
struct Ellipse {
  double cx = 0.0, cy = 0.0;
  double ax = 1.0, ay = 1.0;
  double angle = 0.0;
  double value = 1.0;
  bool additive = false;

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = x - cx, dy = y - cy;
    const double u = (c * dx + s * dy) / ax;
    const double w = (-s * dx + c * dy) / ay;
    return u * u + w * w <= 1.0;
  }
};

inline Image2 make_ellipse_phantom_2d(std::span<const Ellipse> spec, int h, int w,
                                      double pixel_mm = 1.0, int supersample = 1) {
  if (spec.empty()) throw InvalidArgument("phantom spec is empty");
  for (const auto& e : spec)
    if (!(e.ax > 0.0) || !(e.ay > 0.0)) throw InvalidArgument("ellipse semi-axes must be positive");
  Image2 img = Image2::zeros(h, w, {pixel_mm, pixel_mm});
  const int ss = std::max(1, supersample);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int a = 0; a < ss; ++a)
        for (int b = 0; b < ss; ++b) {
          const double x = (j - 0.5 * (w - 1) + (b + 0.5) / ss - 0.5) * pixel_mm;
          const double y = (i - 0.5 * (h - 1) + (a + 0.5) / ss - 0.5) * pixel_mm;
          double val = 0.0;
          for (const auto& e : spec) {
            if (!e.contains(x, y)) continue;
            val = e.additive ? val + e.value : e.value;
          }
          acc += val;
        }
      img.at(i, j) = acc / (ss * ss);
    }
  }
  return img;
}

inline const std::vector<std::string>& breast_material_names() {
  static const std::vector<std::string> names{"adipose", "fibroglandular", "calcification", "air"};
  return names;
}

/// Structural stand-in for a breast CT slice: an adipose ellipse with
/// fibroglandular blobs and a handful of small calcification discs. Each pixel
/// is classified on a 4x4 sub-grid (calcification > fibroglandular > adipose >
/// air), so fractions are multiples of 1/16 and sum to exactly one.
inline MaterialMaps make_breast_phantom_2d(std::uint64_t seed, int h, int w, double pixel_mm = 0.2) {
  if (h < 64 || w < 64) throw InvalidArgument("breast phantom needs at least 64x64 pixels");
  std::mt19937_64 rng(seed);
  const double half_w = 0.5 * w * pixel_mm;
  const double half_h = 0.5 * h * pixel_mm;
  const double rmin = std::min(half_w, half_h);

  Ellipse outline{0.0, 0.0, 0.0, 0.0};
  outline.ax = rmin * uniform(rng, 0.78, 0.88);
  outline.ay = rmin * uniform(rng, 0.62, 0.74);
  outline.angle = uniform(rng, -0.15, 0.15);

  auto inside_scaled = [&](double x, double y, double margin) {
    Ellipse e = outline;
    e.ax *= margin;
    e.ay *= margin;
    return e.contains(x, y);
  };

  std::vector<Ellipse> blobs;
  const int n_blobs = 6 + uniform_index(rng, 6);
  while (static_cast<int>(blobs.size()) < n_blobs) {
    Ellipse b;
    b.cx = uniform(rng, -outline.ax, outline.ax) * 0.6;
    b.cy = uniform(rng, -outline.ay, outline.ay) * 0.6;
    b.ax = rmin * uniform(rng, 0.06, 0.2);
    b.ay = rmin * uniform(rng, 0.05, 0.16);
    b.angle = uniform(rng, 0.0, kPi);
    if (inside_scaled(b.cx, b.cy, 0.55)) blobs.push_back(b);
  }

  // Calcifications: few-pixel discs well inside the outline.
  std::vector<Ellipse> calcs;
  const int n_calc = 3 + uniform_index(rng, 4);
  while (static_cast<int>(calcs.size()) < n_calc) {
    Ellipse c;
    c.cx = uniform(rng, -outline.ax, outline.ax) * 0.7;
    c.cy = uniform(rng, -outline.ay, outline.ay) * 0.7;
    c.ax = c.ay = pixel_mm * uniform(rng, 1.0, 2.2);
    if (inside_scaled(c.cx, c.cy, 0.7)) calcs.push_back(c);
  }

  MaterialMaps out;
  out.names = breast_material_names();
  for (std::size_t m = 0; m < out.names.size(); ++m) out.maps.push_back(Image2::zeros(h, w, {pixel_mm, pixel_mm}));
  constexpr int ss = 4;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      int counts[4] = {0, 0, 0, 0};
      for (int a = 0; a < ss; ++a)
        for (int b = 0; b < ss; ++b) {
          const double x = (j - 0.5 * (w - 1) + (b + 0.5) / ss - 0.5) * pixel_mm;
          const double y = (i - 0.5 * (h - 1) + (a + 0.5) / ss - 0.5) * pixel_mm;
          int cls = 3;
          if (outline.contains(x, y)) {
            cls = 0;
            for (const auto& bl : blobs)
              if (bl.contains(x, y)) cls = 1;
            for (const auto& c : calcs)
              if (c.contains(x, y)) cls = 2;
          }
          ++counts[cls];
        }
      for (int m = 0; m < 4; ++m) out.maps[m].at(i, j) = counts[m] / double(ss * ss);
    }
  }
  return out;
}

/// Two spheres of different density in an n^3 volume: the test object for
/// field fitting.
inline Volume make_two_sphere_phantom(int n, double spacing_mm = 1.0, int supersample = 2) {
  const double s = n * spacing_mm;
  const std::vector<Ellipsoid> spec{
      {Vec3(-0.1875 * s, 0.0, 0.0), Vec3::Constant(0.22 * s), 1.0, false},
      {Vec3(0.22 * s, 0.09 * s, 0.06 * s), Vec3::Constant(0.16 * s), 0.6, false}};
  return make_ellipsoid_phantom(spec, {n, n, n}, {spacing_mm, spacing_mm, spacing_mm}, supersample);
}

/// Centered axis-aligned cube of side n/2 voxels and the given density.
inline Volume make_cube_phantom(int n, double spacing_mm = 1.0, double value = 1.0) {
  Volume v = Volume::zeros({n, n, n}, {spacing_mm, spacing_mm, spacing_mm});
  const int lo = n / 4, hi = lo + n / 2;
  for (int k = lo; k < hi; ++k)
    for (int i = lo; i < hi; ++i)
      for (int j = lo; j < hi; ++j) v.at(k, i, j) = value;
  return v;
}

/// 3D Shepp-Logan head (Kak & Slaney ellipsoids, axes along x/y/z, rotations
/// dropped) with the high-contrast "modified" densities, scaled to the cube.
inline Volume make_shepp_logan_3d(int n, double spacing_mm = 1.0, int supersample = 1) {
  const double h = 0.5 * n * spacing_mm;
  struct E {
    double x, y, z, a, b, c, v;
  };
  const E table[] = {{0, 0, 0, 0.69, 0.92, 0.9, 1.0},        {0, 0, 0, 0.6624, 0.874, 0.88, -0.8},
                     {-0.22, 0, -0.25, 0.41, 0.16, 0.21, -0.2}, {0.22, 0, -0.25, 0.31, 0.11, 0.22, -0.2},
                     {0, 0.35, -0.25, 0.21, 0.25, 0.5, 0.1},  {0, 0.1, -0.25, 0.046, 0.046, 0.046, 0.1},
                     {-0.08, -0.65, -0.25, 0.046, 0.023, 0.02, 0.1}, {0.06, -0.65, -0.25, 0.046, 0.023, 0.02, 0.1},
                     {0.06, -0.105, 0.625, 0.056, 0.04, 0.1, 0.2}, {0, 0.1, 0.625, 0.056, 0.056, 0.1, -0.2}};
  std::vector<Ellipsoid> spec;
  for (const auto& e : table)
    spec.push_back({Vec3(e.x * h, e.y * h, e.z * h), Vec3(e.a * h, e.b * h, e.c * h), e.v, true});
  return make_ellipsoid_phantom(spec, {n, n, n}, {spacing_mm, spacing_mm, spacing_mm}, supersample);
}

/// Uniform disk of radius n/4 pixels.
inline Image2 make_disk_phantom_2d(int n, double pixel_mm = 1.0, double value = 0.5, int supersample = 4) {
  const std::vector<Ellipse> spec{{0.0, 0.0, 0.25 * n * pixel_mm, 0.25 * n * pixel_mm, 0.0, value, false}};
  return make_ellipse_phantom_2d(spec, n, n, pixel_mm, supersample);
}

struct NormalizeResult {
  Volume volume;
  bool degenerate = false;
};

/// Affine rescale to [0, 1]. A constant volume maps to zeros and sets the
/// degenerate flag.
inline NormalizeResult normalize_unit(const Volume& v) {
  NormalizeResult r{v, false};
  if (v.data.empty()) return r;
  const auto [mn, mx] = std::minmax_element(v.data.begin(), v.data.end());
  const double lo = *mn, hi = *mx;
  if (!(hi > lo)) {
    std::fill(r.volume.data.begin(), r.volume.data.end(), 0.0);
    r.degenerate = true;
    return r;
  }
  const double inv = 1.0 / (hi - lo);
  for (double& x : r.volume.data) x = std::clamp((x - lo) * inv, 0.0, 1.0);
  return r;
}

}  // namespace tomokit
