#pragma once

// Image-quality metrics and the composite loss, with analytic gradients of
// SSIM and MS-SSIM with respect to the first (predicted) image.
//
// SSIM uses a separable 11x11 Gaussian window (sigma 1.5) evaluated at every
// fully contained position and averaged. MS-SSIM runs up to five scales with
// 2x2 mean pooling in between; when the image is too small the scale count is
// reduced until the coarsest scale still holds one window, and the weights of
// the retained scales are renormalized.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tomokit/core.hpp"
#include "tomokit/volume.hpp"

namespace tomokit {

struct SsimConfig {
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
  int window = 11;
  double sigma = 1.5;

  void validate() const {
    if (!(k1 > 0.0) || !(k2 > 0.0)) throw InvalidArgument("SSIM constants must be positive");
    if (!(dynamic_range > 0.0)) throw InvalidArgument("SSIM dynamic range must be positive");
    if (window < 1 || !(sigma > 0.0)) throw InvalidArgument("bad SSIM window");
  }
  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

struct LossConfig {
  double alpha = 0.5;
  double beta = 0.25;
  double eps = 1e-12;
  double max_val = 1.0;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0) || !(beta >= 0.0 && beta <= 1.0))
      throw InvalidArgument("alpha and beta must lie in [0, 1]");
    if (!(eps > 0.0) || !(max_val > 0.0)) throw InvalidArgument("eps and max_val must be positive");
  }
};

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

namespace detail {
inline void check_same(std::size_t a, std::size_t b) {
  if (a != b) throw InvalidArgument("dimension mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0) throw InvalidArgument("empty input");
}
inline void check_same(const Image2& a, const Image2& b) {
  if (!a.same_shape(b))
    throw InvalidArgument("dimension mismatch: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                          std::to_string(b.height) + "x" + std::to_string(b.width));
}
}  // namespace detail

inline double rmse(std::span<const double> a, std::span<const double> b) {
  detail::check_same(a.size(), b.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(acc / static_cast<double>(a.size()));
}

inline double mae(std::span<const double> a, std::span<const double> b) {
  detail::check_same(a.size(), b.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += std::abs(a[k] - b[k]);
  return acc / static_cast<double>(a.size());
}

inline double psnr_from_rmse(double r, double max_val, double eps = 1e-12) {
  if (!(max_val > 0.0)) throw InvalidArgument("psnr max_val must be positive");
  return 20.0 * std::log10(max_val / std::max(r, eps));
}

inline double psnr(std::span<const double> a, std::span<const double> b, double max_val = 1.0, double eps = 1e-12) {
  return psnr_from_rmse(rmse(a, b), max_val, eps);
}

inline double rmse(const Image2& a, const Image2& b) {
  detail::check_same(a, b);
  return rmse(a.data, b.data);
}
inline double mae(const Image2& a, const Image2& b) {
  detail::check_same(a, b);
  return mae(a.data, b.data);
}
inline double psnr(const Image2& a, const Image2& b, double max_val = 1.0, double eps = 1e-12) {
  detail::check_same(a, b);
  return psnr(a.data, b.data, max_val, eps);
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
inline std::vector<double> gaussian_taps(int n, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(n));
  double s = 0.0;
  for (int k = 0; k < n; ++k) {
    const double x = k - 0.5 * (n - 1);
    g[k] = std::exp(-x * x / (2.0 * sigma * sigma));
    s += g[k];
  }
  for (double& v : g) v /= s;
  return g;
}

/// Per-window SSIM and contrast-structure terms over valid positions.
struct SsimMaps {
  int rows = 0, cols = 0;  // number of window positions
  std::vector<double> ssim, cs;
  double mean_ssim() const { return mean(ssim); }
  double mean_cs() const { return mean(cs); }

 private:
  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
};

namespace detail {

/// Valid-mode separable correlation of an h x w field with taps g.
inline std::vector<double> correlate_valid(const std::vector<double>& x, int h, int w, const std::vector<double>& g) {
  const int n = static_cast<int>(g.size());
  const int hv = h - n + 1, wv = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wv), out(static_cast<std::size_t>(hv) * wv);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < wv; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += g[k] * x[static_cast<std::size_t>(i) * w + j + k];
      tmp[static_cast<std::size_t>(i) * wv + j] = acc;
    }
  for (int i = 0; i < hv; ++i)
    for (int j = 0; j < wv; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += g[k] * tmp[static_cast<std::size_t>(i + k) * wv + j];
      out[static_cast<std::size_t>(i) * wv + j] = acc;
    }
  return out;
}

/// Transpose of correlate_valid: spreads an hv x wv field back onto h x w.
inline std::vector<double> correlate_valid_transpose(const std::vector<double>& y, int h, int w,
                                                     const std::vector<double>& g) {
  const int n = static_cast<int>(g.size());
  const int hv = h - n + 1, wv = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wv, 0.0), out(static_cast<std::size_t>(h) * w, 0.0);
  for (int i = 0; i < hv; ++i)
    for (int j = 0; j < wv; ++j) {
      const double v = y[static_cast<std::size_t>(i) * wv + j];
      for (int k = 0; k < n; ++k) tmp[static_cast<std::size_t>(i + k) * wv + j] += g[k] * v;
    }
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < wv; ++j) {
      const double v = tmp[static_cast<std::size_t>(i) * wv + j];
      for (int k = 0; k < n; ++k) out[static_cast<std::size_t>(i) * w + j + k] += g[k] * v;
    }
  return out;
}

struct WindowStats {
  int rows = 0, cols = 0;
  std::vector<double> mu_a, mu_b, var_a, var_b, cov;
};

inline WindowStats window_stats(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                                const std::vector<double>& g) {
  const std::size_t n = a.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t k = 0; k < n; ++k) {
    aa[k] = a[k] * a[k];
    bb[k] = b[k] * b[k];
    ab[k] = a[k] * b[k];
  }
  WindowStats s;
  const int wn = static_cast<int>(g.size());
  s.rows = h - wn + 1;
  s.cols = w - wn + 1;
  s.mu_a = correlate_valid(a, h, w, g);
  s.mu_b = correlate_valid(b, h, w, g);
  s.var_a = correlate_valid(aa, h, w, g);
  s.var_b = correlate_valid(bb, h, w, g);
  s.cov = correlate_valid(ab, h, w, g);
  for (std::size_t p = 0; p < s.mu_a.size(); ++p) {
    s.var_a[p] -= s.mu_a[p] * s.mu_a[p];
    s.var_b[p] -= s.mu_b[p] * s.mu_b[p];
    s.cov[p] -= s.mu_a[p] * s.mu_b[p];
  }
  return s;
}

/// Mean SSIM (or mean cs when `cs_only`) of one scale and, optionally, its
/// gradient with respect to `a`.
inline double ssim_scale(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                         const SsimConfig& cfg, bool cs_only, std::vector<double>* grad) {
  if (h < cfg.window || w < cfg.window)
    throw InvalidArgument("image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                          std::to_string(cfg.window) + "x" + std::to_string(cfg.window) + " SSIM window");
  const auto g = gaussian_taps(cfg.window, cfg.sigma);
  const WindowStats s = window_stats(a, b, h, w, g);
  const double c1 = cfg.c1(), c2 = cfg.c2();
  const std::size_t np = s.mu_a.size();
  const double inv_np = 1.0 / static_cast<double>(np);
  double total = 0.0;
  std::vector<double> alpha, beta, gamma;
  if (grad) {
    alpha.resize(np);
    beta.resize(np);
    gamma.resize(np);
  }
  for (std::size_t p = 0; p < np; ++p) {
    const double ma = s.mu_a[p], mb = s.mu_b[p];
    const double A1 = 2.0 * ma * mb + c1, A2 = 2.0 * s.cov[p] + c2;
    const double B1 = ma * ma + mb * mb + c1, B2 = s.var_a[p] + s.var_b[p] + c2;
    if (cs_only) {
      const double cs = A2 / B2;
      total += cs;
      if (grad) {
        alpha[p] = inv_np * (-2.0 * mb + 2.0 * cs * ma) / B2;
        beta[p] = inv_np * 2.0 / B2;
        gamma[p] = inv_np * -2.0 * cs / B2;
      }
    } else {
      const double S = (A1 * A2) / (B1 * B2);
      total += S;
      if (grad) {
        const double D = B1 * B2;
        alpha[p] = inv_np * (2.0 * mb * A2 - 2.0 * A1 * mb - 2.0 * S * ma * B2 + 2.0 * S * B1 * ma) / D;
        beta[p] = inv_np * 2.0 * A1 / D;
        gamma[p] = inv_np * -2.0 * S / B2;
      }
    }
  }
  if (grad) {
    const auto ta = correlate_valid_transpose(alpha, h, w, g);
    const auto tb = correlate_valid_transpose(beta, h, w, g);
    const auto tc = correlate_valid_transpose(gamma, h, w, g);
    grad->assign(a.size(), 0.0);
    for (std::size_t k = 0; k < a.size(); ++k) (*grad)[k] = ta[k] + b[k] * tb[k] + a[k] * tc[k];
  }
  return total * inv_np;
}

inline std::vector<double> pool2(const std::vector<double>& x, int h, int w) {
  const int h2 = h / 2, w2 = w / 2;
  std::vector<double> out(static_cast<std::size_t>(h2) * w2);
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j) {
      const std::size_t r0 = static_cast<std::size_t>(2 * i) * w, r1 = r0 + w;
      out[static_cast<std::size_t>(i) * w2 + j] =
          0.25 * (x[r0 + 2 * j] + x[r0 + 2 * j + 1] + x[r1 + 2 * j] + x[r1 + 2 * j + 1]);
    }
  return out;
}

inline std::vector<double> pool2_transpose(const std::vector<double>& y, int h, int w) {
  const int h2 = h / 2, w2 = w / 2;
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j) {
      const double v = 0.25 * y[static_cast<std::size_t>(i) * w2 + j];
      const std::size_t r0 = static_cast<std::size_t>(2 * i) * w, r1 = r0 + w;
      out[r0 + 2 * j] += v;
      out[r0 + 2 * j + 1] += v;
      out[r1 + 2 * j] += v;
      out[r1 + 2 * j + 1] += v;
    }
  return out;
}

}  // namespace detail

/// Per-window maps, mainly for inspection and testing.
inline SsimMaps ssim_maps(const Image2& a, const Image2& b, const SsimConfig& cfg = {}) {
  cfg.validate();
  detail::check_same(a, b);
  if (a.height < cfg.window || a.width < cfg.window) throw InvalidArgument("image smaller than the SSIM window");
  const auto g = gaussian_taps(cfg.window, cfg.sigma);
  const auto s = detail::window_stats(a.data, b.data, a.height, a.width, g);
  SsimMaps m;
  m.rows = s.rows;
  m.cols = s.cols;
  m.ssim.resize(s.mu_a.size());
  m.cs.resize(s.mu_a.size());
  for (std::size_t p = 0; p < s.mu_a.size(); ++p) {
    const double ma = s.mu_a[p], mb = s.mu_b[p];
    const double A1 = 2.0 * ma * mb + cfg.c1(), A2 = 2.0 * s.cov[p] + cfg.c2();
    const double B1 = ma * ma + mb * mb + cfg.c1(), B2 = s.var_a[p] + s.var_b[p] + cfg.c2();
    m.ssim[p] = (A1 * A2) / (B1 * B2);
    m.cs[p] = A2 / B2;
  }
  return m;
}

inline double ssim(const Image2& a, const Image2& b, const SsimConfig& cfg = {}) {
  cfg.validate();
  detail::check_same(a, b);
  return detail::ssim_scale(a.data, b.data, a.height, a.width, cfg, false, nullptr);
}

/// SSIM and its gradient with respect to `a`.
inline double ssim_grad(const Image2& a, const Image2& b, std::vector<double>& grad_a, const SsimConfig& cfg = {}) {
  cfg.validate();
  detail::check_same(a, b);
  return detail::ssim_scale(a.data, b.data, a.height, a.width, cfg, false, &grad_a);
}

/// Number of MS-SSIM scales usable for an h x w image (at most 5).
inline int ms_ssim_scales(int h, int w, int window = 11) {
  int m = 0;
  while (m < static_cast<int>(kMsSsimWeights.size()) && (h >> m) >= window && (w >> m) >= window) ++m;
  return m;
}

struct MsSsimResult {
  double value = 0.0;
  int scales = 0;
  bool reduced = false;  // fewer than five scales were usable
  std::vector<double> per_scale;  // cs for j < scales-1, ssim for the last
};

namespace detail {
inline MsSsimResult ms_ssim_impl(const Image2& a, const Image2& b, const SsimConfig& cfg, std::vector<double>* grad) {
  cfg.validate();
  check_same(a, b);
  const int M = ms_ssim_scales(a.height, a.width, cfg.window);
  if (M == 0) throw InvalidArgument("image smaller than the SSIM window");
  MsSsimResult r;
  r.scales = M;
  r.reduced = M < static_cast<int>(kMsSsimWeights.size());
  double wsum = 0.0;
  for (int j = 0; j < M; ++j) wsum += kMsSsimWeights[j];

  std::vector<std::vector<double>> as{a.data}, bs{b.data};
  std::vector<int> hs{a.height}, ws{a.width};
  for (int j = 1; j < M; ++j) {
    as.push_back(pool2(as.back(), hs.back(), ws.back()));
    bs.push_back(pool2(bs.back(), hs.back(), ws.back()));
    hs.push_back(hs.back() / 2);
    ws.push_back(ws.back() / 2);
  }
  std::vector<std::vector<double>> grads(static_cast<std::size_t>(M));
  for (int j = 0; j < M; ++j) {
    const bool last = j == M - 1;
    r.per_scale.push_back(ssim_scale(as[j], bs[j], hs[j], ws[j], cfg, !last, grad ? &grads[j] : nullptr));
  }
  if (M == 1) {
    r.value = r.per_scale[0];
    if (grad) *grad = grads[0];
    return r;
  }
  double value = 1.0;
  bool zero = false;
  for (int j = 0; j < M; ++j) {
    const double x = r.per_scale[j];
    if (!(x > 0.0)) {
      zero = true;
      value = 0.0;
      break;
    }
    value *= std::pow(x, kMsSsimWeights[j] / wsum);
  }
  r.value = value;
  if (grad) {
    grad->assign(a.data.size(), 0.0);
    if (zero) return r;
    // dV = V * sum_j w_j / x_j * dx_j, pulled back through the pooling chain.
    std::vector<double> acc(as[M - 1].size(), 0.0);
    for (int j = M - 1; j >= 0; --j) {
      const double f = value * (kMsSsimWeights[j] / wsum) / r.per_scale[j];
      if (j < M - 1) acc = pool2_transpose(acc, hs[j], ws[j]);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += f * grads[j][k];
    }
    *grad = std::move(acc);
  }
  return r;
}
}  // namespace detail

inline MsSsimResult ms_ssim_full(const Image2& a, const Image2& b, const SsimConfig& cfg = {}) {
  return detail::ms_ssim_impl(a, b, cfg, nullptr);
}

inline double ms_ssim(const Image2& a, const Image2& b, const SsimConfig& cfg = {}) {
  return detail::ms_ssim_impl(a, b, cfg, nullptr).value;
}

/// MS-SSIM and its gradient with respect to `a`.
inline MsSsimResult ms_ssim_grad(const Image2& a, const Image2& b, std::vector<double>& grad_a,
                                 const SsimConfig& cfg = {}) {
  return detail::ms_ssim_impl(a, b, cfg, &grad_a);
}

/// L = -alpha PSNR + (1 - alpha) [beta (1 - MS-SSIM) + (1 - beta) MAE].
/// Terms with zero weight are not evaluated.
inline double combo_loss(const Image2& pred, const Image2& target, const LossConfig& cfg = {},
                         const SsimConfig& scfg = {}) {
  cfg.validate();
  detail::check_same(pred, target);
  double loss = 0.0;
  if (cfg.alpha > 0.0) loss -= cfg.alpha * psnr(pred, target, cfg.max_val, cfg.eps);
  if (cfg.alpha < 1.0) {
    double inner = 0.0;
    if (cfg.beta > 0.0) inner += cfg.beta * (1.0 - ms_ssim(pred, target, scfg));
    if (cfg.beta < 1.0) inner += (1.0 - cfg.beta) * mae(pred, target);
    loss += (1.0 - cfg.alpha) * inner;
  }
  return loss;
}

/// Mean 2D SSIM over the axial (z) slices of two volumes.
inline double ssim_volume(const Volume& a, const Volume& b, const SsimConfig& cfg = {}) {
  if (a.dims != b.dims) throw InvalidArgument("volume dimension mismatch");
  double acc = 0.0;
  for (int k = 0; k < a.depth(); ++k) {
    Image2 sa = Image2::zeros(a.height(), a.width()), sb = Image2::zeros(a.height(), a.width());
    const std::size_t off = a.index(k, 0, 0);
    std::copy_n(a.data.begin() + off, sa.size(), sa.data.begin());
    std::copy_n(b.data.begin() + off, sb.size(), sb.data.begin());
    acc += ssim(sa, sb, cfg);
  }
  return acc / a.depth();
}

}  // namespace tomokit
