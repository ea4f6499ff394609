#pragma once

// Line-integral physics.
//
// Volumes are rendered by ray marching: q samples per ray, one per equal
// stratum of [t_near, t_far] (jittered when stratified, midpoints otherwise),
// trilinear interpolation with zero outside the voxel-center lattice, and a
// Riemann sum with dt = (t_far - t_near) / q. The neural field renderer uses
// the same sampler.
//
// 2D fan-beam data go through FanProjector2D, a deterministic midpoint ray
// marcher with bilinear interpolation whose back() is the exact transpose of
// forward().

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tomokit/core.hpp"
#include "tomokit/geometry.hpp"
#include "tomokit/spectral.hpp"
#include "tomokit/volume.hpp"

namespace tomokit {

struct SamplerConfig {
  int samples = 256;
  bool stratified = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (samples < 2) throw InvalidArgument("sampler needs at least 2 samples per ray");
  }
};

/// Sample parameters t_i for a ray; returns the stratum width dt (0 for an
/// empty ray, in which case `t` is left empty).
inline double sample_ray(const Ray& r, const SamplerConfig& cfg, std::vector<double>& t) {
  t.clear();
  if (r.empty()) return 0.0;
  const double dt = r.length() / cfg.samples;
  t.resize(static_cast<std::size_t>(cfg.samples));
  for (int i = 0; i < cfg.samples; ++i) {
    const double off = cfg.stratified ? hashed_uniform(cfg.seed, r.key, static_cast<std::uint64_t>(i)) : 0.5;
    t[i] = r.t_near + (i + off) * dt;
  }
  return dt;
}

/// Trilinear lookup at a world position, zero outside the lattice.
inline double sample_trilinear(const Volume& v, const Vec3& p) {
  const double fx = p.x() / v.spacing[2] + 0.5 * (v.dims[2] - 1);
  const double fy = p.y() / v.spacing[1] + 0.5 * (v.dims[1] - 1);
  const double fz = p.z() / v.spacing[0] + 0.5 * (v.dims[0] - 1);
  const double x0f = std::floor(fx), y0f = std::floor(fy), z0f = std::floor(fz);
  const int x0 = static_cast<int>(x0f), y0 = static_cast<int>(y0f), z0 = static_cast<int>(z0f);
  if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= v.dims[2] || y0 >= v.dims[1] || z0 >= v.dims[0]) return 0.0;
  const double ax = fx - x0f, ay = fy - y0f, az = fz - z0f;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const int z = z0 + dz;
    if (z < 0 || z >= v.dims[0]) continue;
    const double wz = dz ? az : 1.0 - az;
    for (int dy = 0; dy < 2; ++dy) {
      const int y = y0 + dy;
      if (y < 0 || y >= v.dims[1]) continue;
      const double wy = dy ? ay : 1.0 - ay;
      for (int dx = 0; dx < 2; ++dx) {
        const int x = x0 + dx;
        if (x < 0 || x >= v.dims[2]) continue;
        acc += wz * wy * (dx ? ax : 1.0 - ax) * v.at(z, y, x);
      }
    }
  }
  return acc;
}

inline double line_integral(const Volume& v, const Ray& r, const SamplerConfig& cfg) {
  std::vector<double> t;
  const double dt = sample_ray(r, cfg, t);
  double acc = 0.0;
  for (double ti : t) acc += sample_trilinear(v, r.at(ti));
  return acc * dt;
}

namespace detail {
inline Image2 integrate_rays(const Volume& v, const std::vector<Ray>& rays, int h, int w,
                             std::array<double, 2> spacing, const SamplerConfig& cfg, bool transmission) {
  cfg.validate();
  Image2 img = Image2::zeros(h, w, spacing);
  parallel_for(static_cast<std::size_t>(h), [&](std::size_t i) {
    for (int j = 0; j < w; ++j) {
      const std::size_t k = i * static_cast<std::size_t>(w) + j;
      const double p = line_integral(v, rays[k], cfg);
      img.data[k] = transmission ? std::exp(-p) : p;
    }
  });
  return img;
}
}  // namespace detail

/// Digitally reconstructed radiograph over the full detector (det_nv x det_nu).
/// Raw line integrals by default, exp(-p) when `transmission` is set.
inline Image2 project(const Volume& v, const Geometry& g, const Pose& p, const SamplerConfig& cfg,
                      bool transmission = false) {
  g.validate();
  return detail::integrate_rays(v, rays_full(g, p, v.bounds()), g.det_nv, g.det_nu, {g.dv_mm, g.du_mm}, cfg,
                                transmission);
}

inline Image2 project_patch(const Volume& v, const Geometry& g, const Pose& p, const PatchSpec& patch,
                            const SamplerConfig& cfg, bool transmission = false) {
  g.validate();
  return detail::integrate_rays(v, rays_for_patch(g, p, patch, v.bounds()), patch.size, patch.size,
                                {g.dv_mm * patch.scale, g.du_mm * patch.scale}, cfg, transmission);
}

/// Bilinear lookup of an image at continuous pixel coordinates (row, col),
/// clamped to the border. Used to read ground truth at patch samples.
inline double sample_bilinear_clamped(const Image2& img, double row, double col) {
  row = std::clamp(row, 0.0, static_cast<double>(img.height - 1));
  col = std::clamp(col, 0.0, static_cast<double>(img.width - 1));
  const int r0 = std::min(static_cast<int>(row), img.height - 1);
  const int c0 = std::min(static_cast<int>(col), img.width - 1);
  const int r1 = std::min(r0 + 1, img.height - 1);
  const int c1 = std::min(c0 + 1, img.width - 1);
  const double ar = row - r0, ac = col - c0;
  return (1 - ar) * ((1 - ac) * img.at(r0, c0) + ac * img.at(r0, c1)) +
         ar * ((1 - ac) * img.at(r1, c0) + ac * img.at(r1, c1));
}

// ---------------------------------------------------------------------------
// Fan beam (2D).

/// Matched forward/back projector for an H x W image in the z = 0 plane and a
/// fan-beam geometry (det_nv = 1) over a list of source angles.
class FanProjector2D {
 public:
  FanProjector2D(const Geometry& g, std::vector<double> angles, int height, int width,
                 std::array<double, 2> spacing, double samples_per_pixel = 2.0)
      : g_(g), angles_(std::move(angles)), h_(height), w_(width), spacing_(spacing) {
    g_.validate();
    if (g_.det_nv != 1) throw InvalidArgument("fan-beam projector needs det_nv == 1");
    if (height < 1 || width < 1) throw InvalidArgument("image dimensions must be positive");
    if (!(samples_per_pixel > 0.0)) throw InvalidArgument("samples_per_pixel must be positive");
    step_ = std::min(spacing_[0], spacing_[1]) / samples_per_pixel;
    box_ = Box::centered(Vec3(w_ * spacing_[1], h_ * spacing_[0], 1.0));
  }

  int n_views() const { return static_cast<int>(angles_.size()); }
  int n_det() const { return g_.det_nu; }
  int height() const { return h_; }
  int width() const { return w_; }
  const Geometry& geometry() const { return g_; }
  const std::vector<double>& angles() const { return angles_; }

  Image2 blank_image() const { return Image2::zeros(h_, w_, spacing_); }
  Sinogram blank_sinogram() const { return Sinogram::zeros(g_, angles_, SinoStage::line_integral); }

  /// Single view: out[d] = sum over samples of bilinear(img) * dt.
  void forward_view(const Image2& img, int view, std::span<double> out) const {
    check_image(img);
    std::fill(out.begin(), out.end(), 0.0);
    for_each_sample(view, [&](int d, double fi, double fj, double dt) {
      out[d] += dt * gather(img, fi, fj);
    });
  }

  /// Adds the transpose of forward_view applied to `row` into `img`.
  void back_view(std::span<const double> row, int view, Image2& img) const {
    check_image(img);
    for_each_sample(view, [&](int d, double fi, double fj, double dt) {
      if (row[d] != 0.0) scatter(img, fi, fj, dt * row[d]);
    });
  }

  Sinogram forward(const Image2& img) const {
    Sinogram s = blank_sinogram();
    parallel_for(static_cast<std::size_t>(n_views()), [&](std::size_t v) {
      forward_view(img, static_cast<int>(v), s.view(static_cast<int>(v)));
    });
    return s;
  }

  /// Exact transpose of forward(). Views are accumulated in fixed blocks and
  /// merged in order, so the result does not depend on the thread count.
  Image2 back(const Sinogram& s) const {
    if (s.n_views != n_views() || s.n_det != n_det()) throw InvalidArgument("sinogram shape mismatch");
    constexpr std::size_t kBlocks = 8;
    const std::size_t nb = std::min<std::size_t>(kBlocks, static_cast<std::size_t>(n_views()));
    std::vector<Image2> partial(nb, blank_image());
    parallel_for(nb, [&](std::size_t b) {
      const std::size_t lo = b * n_views() / nb, hi = (b + 1) * n_views() / nb;
      for (std::size_t v = lo; v < hi; ++v) back_view(s.view(static_cast<int>(v)), static_cast<int>(v), partial[b]);
    });
    Image2 out = blank_image();
    for (const auto& p : partial)
      for (std::size_t k = 0; k < out.size(); ++k) out.data[k] += p.data[k];
    return out;
  }

  /// Ray for (view, detector bin).
  Ray ray(int view, int det) const {
    const Pose p{angles_[view], 0.0};
    const DetectorFrame f = detector_frame(g_, p);
    return make_ray(f.source, detector_point(g_, f, 0.0, det), box_);
  }

 private:
  void check_image(const Image2& img) const {
    if (img.height != h_ || img.width != w_) throw InvalidArgument("image shape does not match projector");
  }

  template <class Fn>
  void for_each_sample(int view, Fn&& fn) const {
    const Pose p{angles_[view], 0.0};
    const DetectorFrame f = detector_frame(g_, p);
    for (int d = 0; d < g_.det_nu; ++d) {
      const Ray r = make_ray(f.source, detector_point(g_, f, 0.0, d), box_);
      if (r.empty()) continue;
      const int n = std::max(2, static_cast<int>(std::ceil(r.length() / step_)));
      const double dt = r.length() / n;
      for (int k = 0; k < n; ++k) {
        const Vec3 q = r.at(r.t_near + (k + 0.5) * dt);
        const double fj = q.x() / spacing_[1] + 0.5 * (w_ - 1);
        const double fi = q.y() / spacing_[0] + 0.5 * (h_ - 1);
        fn(d, fi, fj, dt);
      }
    }
  }

  static double gather(const Image2& img, double fi, double fj) {
    const double i0f = std::floor(fi), j0f = std::floor(fj);
    const int i0 = static_cast<int>(i0f), j0 = static_cast<int>(j0f);
    const double ai = fi - i0f, aj = fj - j0f;
    double acc = 0.0;
    for (int di = 0; di < 2; ++di) {
      const int i = i0 + di;
      if (i < 0 || i >= img.height) continue;
      const double wi = di ? ai : 1.0 - ai;
      for (int dj = 0; dj < 2; ++dj) {
        const int j = j0 + dj;
        if (j < 0 || j >= img.width) continue;
        acc += wi * (dj ? aj : 1.0 - aj) * img.at(i, j);
      }
    }
    return acc;
  }

  static void scatter(Image2& img, double fi, double fj, double value) {
    const double i0f = std::floor(fi), j0f = std::floor(fj);
    const int i0 = static_cast<int>(i0f), j0 = static_cast<int>(j0f);
    const double ai = fi - i0f, aj = fj - j0f;
    for (int di = 0; di < 2; ++di) {
      const int i = i0 + di;
      if (i < 0 || i >= img.height) continue;
      const double wi = di ? ai : 1.0 - ai;
      for (int dj = 0; dj < 2; ++dj) {
        const int j = j0 + dj;
        if (j < 0 || j >= img.width) continue;
        img.at(i, j) += wi * (dj ? aj : 1.0 - aj) * value;
      }
    }
  }

  Geometry g_;
  std::vector<double> angles_;
  int h_, w_;
  std::array<double, 2> spacing_;
  double step_;
  Box box_;
};

/// Fan-beam sinogram of a 2D map over n_views angles uniform in [0, 2pi).
inline Sinogram sinogram_fan_2d(const Image2& img, const Geometry& g, int n_views, double samples_per_pixel = 2.0) {
  FanProjector2D proj(g, uniform_angles(n_views), img.height, img.width, img.spacing, samples_per_pixel);
  return proj.forward(img);
}

/// Per-material sinograms, in the order of `maps.names` (materials listed in
/// `skip`, typically air, are left out).
struct MaterialSinograms {
  std::vector<std::string> names;
  std::vector<Sinogram> sinos;
};

inline MaterialSinograms sinogram_fan_2d(const MaterialMaps& maps, const Geometry& g, int n_views,
                                         const std::vector<std::string>& skip = {"air"},
                                         double samples_per_pixel = 2.0) {
  MaterialSinograms out;
  for (std::size_t m = 0; m < maps.count(); ++m) {
    if (std::find(skip.begin(), skip.end(), maps.names[m]) != skip.end()) continue;
    out.names.push_back(maps.names[m]);
    out.sinos.push_back(sinogram_fan_2d(maps.maps[m], g, n_views, samples_per_pixel));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spectral forward model.

/// I_w = sum_E S_w(E) exp(-sum_m mu_m(E) p_m) dE per bin, normalized so that
/// zero paths transmit exactly 1.
inline Sinogram spectral_transmission(const MaterialSinograms& ms, const SpectralModel& model, Channel channel) {
  if (ms.sinos.empty()) throw InvalidArgument("no material sinograms");
  const Sinogram& ref = ms.sinos.front();
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < ms.sinos.size(); ++k) {
    if (!ms.sinos[k].same_shape(ref)) throw InvalidArgument("material sinogram dimension mismatch");
    if (ms.sinos[k].stage != SinoStage::line_integral)
      throw InvalidArgument("spectral_transmission expects line-integral sinograms");
    ids.push_back(model.material_index(ms.names[k]));
  }
  Sinogram out = ref;
  out.stage = SinoStage::transmission;
  const auto weights = model.weights(channel);
  parallel_for(static_cast<std::size_t>(ref.n_views), [&](std::size_t v) {
    std::vector<double> paths(ids.size());
    for (int d = 0; d < ref.n_det; ++d) {
      for (std::size_t k = 0; k < ids.size(); ++k) paths[k] = ms.sinos[k].at(static_cast<int>(v), d);
      out.at(static_cast<int>(v), d) = polychromatic_transmission(model, weights, ids, paths);
    }
  });
  return out;
}

/// p = -ln(I).
inline Sinogram log_transform(const Sinogram& t) {
  if (t.stage != SinoStage::transmission) throw InvalidArgument("log_transform expects a transmission sinogram");
  Sinogram out = t;
  out.stage = SinoStage::log_transmission;
  for (std::size_t k = 0; k < out.data.size(); ++k) {
    if (!(t.data[k] > 0.0))
      throw InvalidArgument("non-positive transmission at bin " + std::to_string(k));
    out.data[k] = -std::log(t.data[k]);
  }
  return out;
}

}  // namespace tomokit
