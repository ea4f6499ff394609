#pragma once

// Fan-beam filtered backprojection and SART with total-variation descent.
//
// FBP works directly on the flat-detector fan geometry. With the detector
// coordinate rescaled to the isocenter (s = u d1 / d2, pitch ds):
//
//   R'(s)   = R(s) * d1 / sqrt(d1^2 + s^2)                 cosine weight
//   Q(s)    = ds / 2 * (R' conv h)(s)                      ramp, h on pitch ds
//   f(x, y) = sum_views dbeta * Q(s'(x, y)) / U^2
//
// where U = (d1 + <P, axis>) / d1 and s' = <P, e_u> d1 / (d1 + <P, axis>) for a
// pixel at P. This is the equal-spaced collinear-detector formula over a full
// 2pi scan.

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tomokit/core.hpp"
#include "tomokit/geometry.hpp"
#include "tomokit/projector.hpp"
#include "tomokit/volume.hpp"

namespace tomokit {

enum class RampFilter { ram_lak, shepp_logan };
enum class ConvBoundary { zero_pad, periodic };
enum class Interp { nearest, linear };

inline RampFilter parse_ramp_filter(const std::string& s) {
  if (s == "ram-lak" || s == "ramlak") return RampFilter::ram_lak;
  if (s == "shepp-logan" || s == "shepp-logan-window") return RampFilter::shepp_logan;
  throw InvalidArgument("unknown filter '" + s + "' (ram-lak, shepp-logan)");
}

inline Interp parse_interp(const std::string& s) {
  if (s == "nearest") return Interp::nearest;
  if (s == "linear") return Interp::linear;
  throw InvalidArgument("unknown interpolation '" + s + "' (nearest, linear)");
}

/// Spatial tap h[n] of the discrete ramp for detector pitch `pitch`.
/// Ram-Lak: h[0] = 1/(4 d^2), h[odd n] = -1/(pi n d)^2, else 0.
/// Shepp-Logan: h[n] = -2 / (pi^2 d^2 (4 n^2 - 1)).
inline double ramp_tap(long n, double pitch, RampFilter f) {
  const double d2 = pitch * pitch;
  if (f == RampFilter::shepp_logan) return -2.0 / (kPi * kPi * d2 * (4.0 * double(n) * n - 1.0));
  if (n == 0) return 1.0 / (4.0 * d2);
  if (n % 2 == 0) return 0.0;
  const double x = kPi * double(n) * pitch;
  return -1.0 / (x * x);
}

/// Tap of the kernel periodized with period P, i.e. sum_j h[n + j P], in
/// closed form. Its taps sum to zero, so a constant input maps to zero.
inline double ramp_tap_periodic(long n, long period, double pitch, RampFilter f) {
  const double P = static_cast<double>(period);
  const double d2 = pitch * pitch;
  n = ((n % period) + period) % period;
  if (f == RampFilter::shepp_logan) {
    const double a = kPi * (2.0 * n - 1.0) / (2.0 * P);
    const double b = kPi * (2.0 * n + 1.0) / (2.0 * P);
    return -(1.0 / std::tan(a) - 1.0 / std::tan(b)) / (2.0 * kPi * P * d2);
  }
  if (period % 2 == 0) {
    if (n == 0) return 1.0 / (4.0 * d2);
    if (n % 2 == 0) return 0.0;
    const double s = std::sin(kPi * n / P);
    return -1.0 / (d2 * P * P * s * s);
  }
  if (n == 0) return 1.0 / (4.0 * d2) - 1.0 / (4.0 * d2 * P * P);
  const long odd = (n % 2 == 1) ? n : n + period;
  const double s = std::sin(kPi * odd / (2.0 * P));
  return -1.0 / (4.0 * d2 * P * P * s * s);
}

/// Convolves one view with the ramp kernel. Zero padding by default; the
/// periodic mode wraps the view onto itself.
inline void ramp_filter_view(std::span<const double> in, std::span<double> out, double pitch,
                             RampFilter f = RampFilter::ram_lak, ConvBoundary b = ConvBoundary::zero_pad) {
  const long n = static_cast<long>(in.size());
  std::vector<double> taps(static_cast<std::size_t>(2 * n - 1));
  for (long k = -(n - 1); k <= n - 1; ++k)
    taps[static_cast<std::size_t>(k + n - 1)] =
        b == ConvBoundary::zero_pad ? ramp_tap(k, pitch, f) : ramp_tap_periodic(k, n, pitch, f);
  const bool sparse = f == RampFilter::ram_lak && b == ConvBoundary::zero_pad;
  for (long i = 0; i < n; ++i) {
    double acc = 0.0;
    if (b == ConvBoundary::zero_pad) {
      for (long k = 0; k < n; ++k) {
        const long d = i - k;
        if (sparse && d != 0 && (d & 1) == 0) continue;
        acc += in[k] * taps[static_cast<std::size_t>(d + n - 1)];
      }
    } else {
      for (long k = 0; k < n; ++k) {
        long d = i - k;
        if (d < 0) d += n;
        acc += in[k] * taps[static_cast<std::size_t>(d + n - 1)];
      }
    }
    out[i] = acc;
  }
}

/// Ramp-filters every view using the detector pitch from the sinogram's
/// geometry.
inline Sinogram ramp_filter(const Sinogram& s, RampFilter f = RampFilter::ram_lak,
                            ConvBoundary b = ConvBoundary::zero_pad) {
  if (s.stage == SinoStage::transmission) throw InvalidArgument("ramp_filter expects line integrals or log transmission");
  Sinogram out = s;
  parallel_for(static_cast<std::size_t>(s.n_views), [&](std::size_t v) {
    ramp_filter_view(s.view(static_cast<int>(v)), out.view(static_cast<int>(v)), s.geometry.du_mm, f, b);
  });
  return out;
}

struct FbpConfig {
  RampFilter filter = RampFilter::ram_lak;
  Interp interpolation = Interp::linear;
  int height = 512;
  int width = 512;
  double pixel_mm = 1.0;

  void validate() const {
    if (height < 1 || width < 1) throw InvalidArgument("FBP output dims must be positive");
    if (!(pixel_mm > 0.0)) throw InvalidArgument("FBP pixel spacing must be positive");
  }
};

inline Image2 fbp_fan_2d(const Sinogram& s, const FbpConfig& cfg) {
  cfg.validate();
  s.validate();
  if (s.n_views < 2) throw InvalidArgument("FBP needs at least 2 views");
  if (s.stage == SinoStage::transmission) throw InvalidArgument("FBP expects line integrals or log transmission");
  const Geometry& g = s.geometry;
  g.validate();
  const double d1 = g.d1_mm;
  const double ds = g.du_mm * d1 / g.d2_mm;
  const double center = 0.5 * (s.n_det - 1);
  const double dbeta = 2.0 * kPi / s.n_views;

  // Weighted, filtered views.
  std::vector<double> filtered(s.data.size());
  parallel_for(static_cast<std::size_t>(s.n_views), [&](std::size_t v) {
    std::vector<double> w(static_cast<std::size_t>(s.n_det));
    const auto in = s.view(static_cast<int>(v));
    for (int d = 0; d < s.n_det; ++d) {
      const double sd = (d - center) * ds;
      w[d] = in[d] * d1 / std::sqrt(d1 * d1 + sd * sd);
    }
    std::span<double> out(filtered.data() + v * s.n_det, static_cast<std::size_t>(s.n_det));
    ramp_filter_view(w, out, ds, cfg.filter, ConvBoundary::zero_pad);
    for (double& x : out) x *= 0.5 * ds;
  });

  Image2 img = Image2::zeros(cfg.height, cfg.width, {cfg.pixel_mm, cfg.pixel_mm});
  std::vector<double> cb(s.n_views), sb(s.n_views);
  for (int v = 0; v < s.n_views; ++v) {
    cb[v] = std::cos(s.angles[v]);
    sb[v] = std::sin(s.angles[v]);
  }
  parallel_for(static_cast<std::size_t>(cfg.height), [&](std::size_t ii) {
    const int i = static_cast<int>(ii);
    const double y = (i - 0.5 * (cfg.height - 1)) * cfg.pixel_mm;
    for (int j = 0; j < cfg.width; ++j) {
      const double x = (j - 0.5 * (cfg.width - 1)) * cfg.pixel_mm;
      double acc = 0.0;
      for (int v = 0; v < s.n_views; ++v) {
        const double along = -x * sb[v] + y * cb[v];  // <P, axis>
        const double L = d1 + along;
        if (!(L > 0.0)) continue;
        const double sp = (x * cb[v] + y * sb[v]) * d1 / L;
        const double fd = sp / ds + center;
        const double* q = filtered.data() + static_cast<std::size_t>(v) * s.n_det;
        double val = 0.0;
        if (cfg.interpolation == Interp::nearest) {
          const long k = std::lround(fd);
          if (k < 0 || k >= s.n_det) continue;
          val = q[k];
        } else {
          const double k0f = std::floor(fd);
          const long k0 = static_cast<long>(k0f);
          if (k0 < -1 || k0 >= s.n_det) continue;
          const double a = fd - k0f;
          if (k0 >= 0) val += (1.0 - a) * q[k0];
          if (k0 + 1 < s.n_det) val += a * q[k0 + 1];
        }
        const double U = L / d1;
        acc += val / (U * U);
      }
      img.at(i, j) = acc * dbeta;
    }
  });
  return img;
}

// ---------------------------------------------------------------------------
// Total variation.

inline constexpr double kTvEpsilon = 1e-8;

/// Isotropic TV with forward differences (zero past the last row/column) and
/// smoothing epsilon: sum sqrt(dx^2 + dy^2 + eps^2).
inline double tv_value(const Image2& img, double eps = kTvEpsilon) {
  double acc = 0.0;
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j) {
      const double dx = j + 1 < img.width ? img.at(i, j + 1) - img.at(i, j) : 0.0;
      const double dy = i + 1 < img.height ? img.at(i + 1, j) - img.at(i, j) : 0.0;
      acc += std::sqrt(dx * dx + dy * dy + eps * eps);
    }
  return acc;
}

inline Image2 tv_gradient(const Image2& img, double eps = kTvEpsilon) {
  Image2 g = Image2::zeros(img.height, img.width, img.spacing);
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j) {
      const bool hx = j + 1 < img.width, hy = i + 1 < img.height;
      const double dx = hx ? img.at(i, j + 1) - img.at(i, j) : 0.0;
      const double dy = hy ? img.at(i + 1, j) - img.at(i, j) : 0.0;
      const double n = std::sqrt(dx * dx + dy * dy + eps * eps);
      if (hx) {
        g.at(i, j) -= dx / n;
        g.at(i, j + 1) += dx / n;
      }
      if (hy) {
        g.at(i, j) -= dy / n;
        g.at(i + 1, j) += dy / n;
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// SART + TV.

struct TvConfig {
  int n_outer = 20;
  int n_tv_steps = 10;
  double tv_step_size = 0.2;  // fraction of the SART update norm per TV step
  double relaxation = 1.0;    // SART lambda in (0, 2)
  double stop_tolerance = 0.0;
  int height = 128;
  int width = 128;
  double pixel_mm = 1.0;
  double samples_per_pixel = 2.0;

  void validate() const {
    if (n_outer < 0 || n_tv_steps < 0) throw InvalidArgument("iteration counts must be >= 0");
    if (!(tv_step_size >= 0.0)) throw InvalidArgument("tv_step_size must be >= 0");
    if (!(relaxation > 0.0 && relaxation < 2.0)) throw InvalidArgument("SART relaxation must lie in (0, 2)");
    if (height < 1 || width < 1 || !(pixel_mm > 0.0)) throw InvalidArgument("bad output grid");
  }
};

struct SartTvIteration {
  int iter = 0;
  double residual = 0.0;  // ||Ax - b|| / ||b||
  double tv = 0.0;
  std::vector<double> sart_residuals;  // after each SART sweep's clamp, before TV
  std::vector<double> tv_trace;        // TV before and after each accepted TV step
};

struct SartTvResult {
  Image2 image;
  std::vector<SartTvIteration> log;
  double initial_residual = 0.0;
  bool converged = false;
};

namespace detail {
inline double relative_residual(const FanProjector2D& proj, const Image2& x, const Sinogram& b, double bnorm) {
  const Sinogram ax = proj.forward(x);
  double acc = 0.0;
  for (std::size_t k = 0; k < ax.data.size(); ++k) {
    const double r = ax.data[k] - b.data[k];
    acc += r * r;
  }
  return bnorm > 0.0 ? std::sqrt(acc) / bnorm : std::sqrt(acc);
}

inline double l2(const std::vector<double>& v) {
  double a = 0.0;
  for (double x : v) a += x * x;
  return std::sqrt(a);
}
}  // namespace detail

/// Alternates a SART sweep over views in natural angle order (relaxation
/// lambda, nonnegativity clamp) with n_tv_steps of normalized steepest descent
/// on TV. TV steps have length tv_step_size * ||x_sart - x_prev|| and are
/// halved until TV does not increase.
inline SartTvResult sart_tv(const Sinogram& b, const TvConfig& cfg, std::optional<Image2> init = std::nullopt) {
  cfg.validate();
  b.validate();
  if (b.stage == SinoStage::transmission) throw InvalidArgument("sart_tv expects line integrals or log transmission");
  FanProjector2D proj(b.geometry, b.angles, cfg.height, cfg.width, {cfg.pixel_mm, cfg.pixel_mm},
                      cfg.samples_per_pixel);
  SartTvResult res;
  res.image = init ? *init : proj.blank_image();
  if (!res.image.same_shape(proj.blank_image())) throw InvalidArgument("init image shape mismatch");
  Image2& x = res.image;
  const double bnorm = detail::l2(b.data);
  res.initial_residual = detail::relative_residual(proj, x, b, bnorm);
  if (cfg.n_outer == 0) return res;

  // Row sums (A 1) per view, fixed for the run.
  const Image2 ones = [&] {
    Image2 o = proj.blank_image();
    std::fill(o.data.begin(), o.data.end(), 1.0);
    return o;
  }();
  std::vector<double> row_sums(b.data.size());
  for (int v = 0; v < b.n_views; ++v)
    proj.forward_view(ones, v, std::span<double>(row_sums.data() + static_cast<std::size_t>(v) * b.n_det, b.n_det));

  const double guard = 10.0 * std::max(res.initial_residual, 1e-300);
  std::vector<double> ax(static_cast<std::size_t>(b.n_det)), corr(static_cast<std::size_t>(b.n_det)),
      ones_row(static_cast<std::size_t>(b.n_det), 1.0);
  Image2 upd = proj.blank_image(), colsum = proj.blank_image();

  for (int outer = 0; outer < cfg.n_outer; ++outer) {
    const Image2 x_prev = x;
    SartTvIteration it;
    it.iter = outer + 1;
    for (int v = 0; v < b.n_views; ++v) {
      proj.forward_view(x, v, ax);
      const auto bv = b.view(v);
      for (int d = 0; d < b.n_det; ++d) {
        const double rs = row_sums[static_cast<std::size_t>(v) * b.n_det + d];
        corr[d] = rs > 0.0 ? (bv[d] - ax[d]) / rs : 0.0;
      }
      std::fill(upd.data.begin(), upd.data.end(), 0.0);
      std::fill(colsum.data.begin(), colsum.data.end(), 0.0);
      proj.back_view(corr, v, upd);
      proj.back_view(ones_row, v, colsum);
      for (std::size_t k = 0; k < x.size(); ++k)
        if (colsum.data[k] > 0.0) x.data[k] += cfg.relaxation * upd.data[k] / colsum.data[k];
    }
    for (double& val : x.data) val = std::max(val, 0.0);
    const double r_sart = detail::relative_residual(proj, x, b, bnorm);
    it.sart_residuals.push_back(r_sart);
    if (!std::isfinite(r_sart) || r_sart > guard)
      throw NumericalError("sart_tv diverged at iteration " + std::to_string(outer + 1) + ": residual " +
                           std::to_string(r_sart) + " exceeds 10x the initial " +
                           std::to_string(res.initial_residual));

    if (cfg.n_tv_steps > 0 && cfg.tv_step_size > 0.0) {
      double dp = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) dp += (x.data[k] - x_prev.data[k]) * (x.data[k] - x_prev.data[k]);
      dp = std::sqrt(dp);
      double tv0 = tv_value(x);
      it.tv_trace.push_back(tv0);
      for (int s = 0; s < cfg.n_tv_steps; ++s) {
        const Image2 g = tv_gradient(x);
        const double gn = detail::l2(g.data);
        if (!(gn > 0.0)) break;
        double step = cfg.tv_step_size * dp;
        bool accepted = false;
        Image2 trial = x;
        for (int halving = 0; halving < 30 && step > 0.0; ++halving, step *= 0.5) {
          for (std::size_t k = 0; k < x.size(); ++k) trial.data[k] = x.data[k] - step * g.data[k] / gn;
          const double tv1 = tv_value(trial);
          if (tv1 <= tv0) {
            x = trial;
            tv0 = tv1;
            accepted = true;
            break;
          }
        }
        if (!accepted) break;
        it.tv_trace.push_back(tv0);
      }
    }
    it.residual = detail::relative_residual(proj, x, b, bnorm);
    it.tv = tv_value(x);
    res.log.push_back(std::move(it));
    if (res.log.back().residual < cfg.stop_tolerance) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace tomokit
