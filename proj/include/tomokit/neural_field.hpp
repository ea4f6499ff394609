#pragma once

// Conditional density field rendered as X-ray line integrals.
//
//   h     = h_theta(gamma(x) ++ z_sh)                  shape branch
//   delta = softplus(d_theta(h ++ gamma(xi) ++ z_a))    density head
//
// x is the sample position normalized to [-1, 1]^3 relative to the field's
// box, xi the view pose scaled to [-1, 1]^2 (theta wrapped to (-pi, pi] and
// divided by pi, phi divided by pi/2), and gamma the sinusoidal encoding.
// Rendering is the plain Riemann sum sum_i delta(x_i) dt over the same
// stratified samples as the physical projector.
//
// Gradients are reverse-mode: predictions from all rays feed the loss, the
// per-ray upstream gradient is pushed through the sum and the network in
// fixed chunks of rays, and chunk buffers are merged in chunk order so the
// result does not depend on the worker count.

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tomokit/core.hpp"
#include "tomokit/geometry.hpp"
#include "tomokit/io.hpp"
#include "tomokit/metrics.hpp"
#include "tomokit/projector.hpp"
#include "tomokit/volume.hpp"

namespace tomokit {

struct EncodingConfig {
  int n_freq = 10;
  bool include_raw = true;

  int out_dim(int dim) const { return dim * ((include_raw ? 1 : 0) + 2 * n_freq); }
  void validate() const {
    if (n_freq < 0) throw InvalidArgument("encoding band count must be >= 0");
  }
};

/// [x] ++ [sin(2^k pi x_d), cos(2^k pi x_d)] for k = 0..n-1, per component d.
template <class S>
void encode_into(const S* x, int dim, const EncodingConfig& cfg, S* out) {
  int o = 0;
  if (cfg.include_raw)
    for (int d = 0; d < dim; ++d) out[o++] = x[d];
  for (int k = 0; k < cfg.n_freq; ++k) {
    const S f = static_cast<S>(std::ldexp(kPi, k));
    for (int d = 0; d < dim; ++d) {
      out[o++] = std::sin(f * x[d]);
      out[o++] = std::cos(f * x[d]);
    }
  }
}

inline std::vector<double> encode(std::span<const double> x, const EncodingConfig& cfg) {
  cfg.validate();
  std::vector<double> out(static_cast<std::size_t>(cfg.out_dim(static_cast<int>(x.size()))));
  encode_into(x.data(), static_cast<int>(x.size()), cfg, out.data());
  return out;
}

/// Pose mapped to [-1, 1]^2 for the direction encoding; pose (0, 0) maps to
/// the origin.
inline std::array<double, 2> normalized_pose(const Pose& p) {
  double t = p.theta;
  if (t > kPi) t -= 2.0 * kPi;
  return {t / kPi, p.phi / (0.5 * kPi)};
}

enum class Activation { relu, tanh };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw InvalidArgument("unknown activation '" + s + "'");
}

struct FieldArch {
  EncodingConfig pos{10, true};
  EncodingConfig dir{4, true};
  int m_sh = 32;
  int m_a = 32;
  std::vector<int> shape_widths{128, 128, 128, 128};
  std::vector<int> density_widths{64, 64};
  Activation hidden = Activation::relu;

  int shape_input() const { return pos.out_dim(3) + m_sh; }
  int hidden_dim() const { return shape_widths.back(); }
  int density_input() const { return hidden_dim() + dir.out_dim(2) + m_a; }

  void validate() const {
    pos.validate();
    dir.validate();
    if (m_sh < 0 || m_a < 0) throw InvalidArgument("latent code lengths must be >= 0");
    if (shape_widths.empty()) throw InvalidArgument("shape branch needs at least one layer");
    for (int w : shape_widths)
      if (w < 1) throw InvalidArgument("layer widths must be positive");
    for (int w : density_widths)
      if (w < 1) throw InvalidArgument("layer widths must be positive");
  }

  nlohmann::json to_json() const {
    return {{"n_freq_pos", pos.n_freq}, {"raw_pos", pos.include_raw}, {"n_freq_dir", dir.n_freq},
            {"raw_dir", dir.include_raw}, {"m_sh", m_sh}, {"m_a", m_a}, {"shape_widths", shape_widths},
            {"density_widths", density_widths}, {"activation", to_string(hidden)}};
  }
  static FieldArch from_json(const nlohmann::json& j) {
    FieldArch a;
    a.pos = {j.at("n_freq_pos").get<int>(), j.at("raw_pos").get<bool>()};
    a.dir = {j.at("n_freq_dir").get<int>(), j.at("raw_dir").get<bool>()};
    a.m_sh = j.at("m_sh").get<int>();
    a.m_a = j.at("m_a").get<int>();
    a.shape_widths = j.at("shape_widths").get<std::vector<int>>();
    a.density_widths = j.at("density_widths").get<std::vector<int>>();
    a.hidden = parse_activation(j.at("activation").get<std::string>());
    a.validate();
    return a;
  }
};

template <class S>
struct LatentCodesT {
  std::vector<S> z_sh, z_a;

  static LatentCodesT sample(std::uint64_t seed, int m_sh, int m_a) {
    std::mt19937_64 rng(hash_combine(seed, 0x2a7e5c0deULL));
    LatentCodesT c;
    for (int k = 0; k < m_sh; ++k) c.z_sh.push_back(static_cast<S>(standard_normal(rng)));
    for (int k = 0; k < m_a; ++k) c.z_a.push_back(static_cast<S>(standard_normal(rng)));
    return c;
  }
};

struct LayerInfo {
  std::string name;
  int in = 0, out = 0;
  std::size_t w_off = 0, b_off = 0;
};

template <class S>
class FieldNetwork {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

  FieldArch arch;
  Box box = Box::centered(Vec3(2.0, 2.0, 2.0));
  std::vector<LayerInfo> layers;  // shape layers, density layers, head
  std::vector<S> params;

  FieldNetwork() = default;

  /// Uniform fan-in initialization, zero biases. With `zero_final` the head
  /// starts at zero so delta = softplus(0) everywhere.
  static FieldNetwork create(const FieldArch& arch, std::uint64_t seed, bool zero_final = true,
                             const Box& box = Box::centered(Vec3(2.0, 2.0, 2.0))) {
    arch.validate();
    FieldNetwork n;
    n.arch = arch;
    n.box = box;
    std::size_t off = 0;
    auto add = [&](const std::string& name, int in, int out) {
      LayerInfo l{name, in, out, off, off + static_cast<std::size_t>(in) * out};
      off = l.b_off + static_cast<std::size_t>(out);
      n.layers.push_back(l);
    };
    int in = arch.shape_input();
    for (std::size_t k = 0; k < arch.shape_widths.size(); ++k) {
      add("shape" + std::to_string(k), in, arch.shape_widths[k]);
      in = arch.shape_widths[k];
    }
    in = arch.density_input();
    for (std::size_t k = 0; k < arch.density_widths.size(); ++k) {
      add("density" + std::to_string(k), in, arch.density_widths[k]);
      in = arch.density_widths[k];
    }
    add("head", in, 1);
    n.params.assign(off, S(0));
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < n.layers.size(); ++l) {
      const auto& L = n.layers[l];
      if (zero_final && l + 1 == n.layers.size()) continue;
      const double gain = arch.hidden == Activation::relu ? 6.0 : 3.0;
      const double bound = std::sqrt(gain / L.in);
      for (std::size_t k = 0; k < static_cast<std::size_t>(L.in) * L.out; ++k)
        n.params[L.w_off + k] = static_cast<S>(uniform(rng, -bound, bound));
    }
    return n;
  }

  std::size_t n_params() const { return params.size(); }
  std::size_t n_shape_layers() const { return arch.shape_widths.size(); }

  void check_codes(const LatentCodesT<S>& c) const {
    if (static_cast<int>(c.z_sh.size()) != arch.m_sh || static_cast<int>(c.z_a.size()) != arch.m_a)
      throw InvalidArgument("latent code lengths do not match the network");
  }

  /// Normalized coordinates of a world point.
  Vec3 normalize(const Vec3& p) const { return (p - box.center()).cwiseQuotient(box.half_extent()); }

  struct Cache {
    std::vector<Mat> acts;  // acts[0] shape input, acts[l+1] output of layer l (head excluded)
    RowVec y;               // head pre-activation
    int n = 0;
  };

  /// Batched forward. `enc_x` is (pos_dim x n). Returns delta (1 x n).
  RowVec forward(const Mat& enc_x, const Vec& enc_dir, const LatentCodesT<S>& codes, Cache* cache) const {
    const int n = static_cast<int>(enc_x.cols());
    const int pd = arch.pos.out_dim(3);
    Mat a(arch.shape_input(), n);
    a.topRows(pd) = enc_x;
    for (int k = 0; k < arch.m_sh; ++k) a.row(pd + k).setConstant(codes.z_sh[k]);
    if (cache) {
      cache->acts.clear();
      cache->n = n;
      cache->acts.push_back(a);
    }
    const std::size_t ns = n_shape_layers();
    for (std::size_t l = 0; l < ns; ++l) {
      a = apply(l, a);
      if (cache) cache->acts.push_back(a);
    }
    {
      const int hd = arch.hidden_dim(), dd = arch.dir.out_dim(2);
      Mat d(arch.density_input(), n);
      d.topRows(hd) = a;
      for (int k = 0; k < dd; ++k) d.row(hd + k).setConstant(enc_dir[k]);
      for (int k = 0; k < arch.m_a; ++k) d.row(hd + dd + k).setConstant(codes.z_a[k]);
      a = std::move(d);
      if (cache) cache->acts.push_back(a);
    }
    for (std::size_t l = ns; l + 1 < layers.size(); ++l) {
      a = apply(l, a);
      if (cache) cache->acts.push_back(a);
    }
    const auto& H = layers.back();
    RowVec y = weights(H) * a;
    y.array() += params[H.b_off];
    RowVec out(n);
    for (int k = 0; k < n; ++k) out[k] = softplus(y[k]);
    if (cache) cache->y = std::move(y);
    return out;
  }

  /// Accumulates parameter and code gradients for upstream dL/d(delta).
  void backward(const Cache& c, const RowVec& d_delta, S* g_params, S* g_zsh, S* g_za) const {
    const std::size_t nl = layers.size(), ns = n_shape_layers();
    Mat d(1, c.n);
    for (int k = 0; k < c.n; ++k) d(0, k) = d_delta[k] * sigmoid(c.y[k]);
    // acts index of the input to layer l: l for shape layers, l + 1 for density/head.
    auto input_of = [&](std::size_t l) -> const Mat& { return c.acts[l < ns ? l : l + 1]; };
    for (std::size_t l = nl; l-- > 0;) {
      const auto& L = layers[l];
      if (l + 1 < nl) {
        const Mat& out = c.acts[l < ns ? l + 1 : l + 2];
        d.array() *= act_prime(out).array();
      }
      const Mat& in = input_of(l);
      const Mat gw = d * in.transpose();
      const Vec gb = d.rowwise().sum();
      for (Eigen::Index k = 0; k < gw.size(); ++k) g_params[L.w_off + static_cast<std::size_t>(k)] += gw.data()[k];
      for (Eigen::Index k = 0; k < gb.size(); ++k) g_params[L.b_off + static_cast<std::size_t>(k)] += gb[k];
      Mat din = weights(L).transpose() * d;
      if (l == ns) {
        // Density input: split into h, direction (no gradient) and z_a.
        const int hd = arch.hidden_dim(), dd = arch.dir.out_dim(2);
        if (g_za)
          for (int k = 0; k < arch.m_a; ++k) g_za[k] += din.row(hd + dd + k).sum();
        din = din.topRows(hd).eval();
      }
      if (l == 0) {
        if (g_zsh) {
          const int pd = arch.pos.out_dim(3);
          for (int k = 0; k < arch.m_sh; ++k) g_zsh[k] += din.row(pd + k).sum();
        }
        break;
      }
      d = std::move(din);
    }
  }

  /// Hidden code h for one normalized point.
  Vec hidden(const Vec3& x, const LatentCodesT<S>& codes) const {
    check_codes(codes);
    Mat a(arch.shape_input(), 1);
    std::vector<S> e(static_cast<std::size_t>(arch.pos.out_dim(3)));
    const S xs[3] = {S(x[0]), S(x[1]), S(x[2])};
    encode_into(xs, 3, arch.pos, e.data());
    for (std::size_t k = 0; k < e.size(); ++k) a(static_cast<int>(k), 0) = e[k];
    for (int k = 0; k < arch.m_sh; ++k) a(arch.pos.out_dim(3) + k, 0) = codes.z_sh[k];
    for (std::size_t l = 0; l < n_shape_layers(); ++l) a = apply(l, a);
    return a.col(0);
  }

  Vec encode_pose(const Pose& p) const {
    const auto xi = normalized_pose(p);
    const S v[2] = {S(xi[0]), S(xi[1])};
    Vec out(arch.dir.out_dim(2));
    encode_into(v, 2, arch.dir, out.data());
    return out;
  }

  /// delta at a normalized point; zero outside [-1, 1]^3.
  double eval(const Vec3& x, const Pose& pose, const LatentCodesT<S>& codes) const {
    check_codes(codes);
    if (x.cwiseAbs().maxCoeff() > 1.0) return 0.0;
    Mat e(arch.pos.out_dim(3), 1);
    const S xs[3] = {S(x[0]), S(x[1]), S(x[2])};
    encode_into(xs, 3, arch.pos, e.data());
    return static_cast<double>(forward(e, encode_pose(pose), codes, nullptr)[0]);
  }

  static S softplus(S y) { return y > S(0) ? y + std::log1p(std::exp(-y)) : std::log1p(std::exp(y)); }
  static S sigmoid(S y) {
    if (y >= S(0)) return S(1) / (S(1) + std::exp(-y));
    const S e = std::exp(y);
    return e / (S(1) + e);
  }

  // Copied into Eigen-owned (aligned) storage: vectorized products over a Map
  // of std::vector memory round differently depending on the address, which
  // breaks run-to-run reproducibility.
  Mat weights(const LayerInfo& L) const { return Eigen::Map<const Mat>(params.data() + L.w_off, L.out, L.in); }

 private:
  Mat apply(std::size_t l, const Mat& a) const {
    const auto& L = layers[l];
    Mat z = weights(L) * a;
    z.colwise() += Eigen::Map<const Vec>(params.data() + L.b_off, L.out);
    if (arch.hidden == Activation::relu)
      z = z.cwiseMax(S(0));
    else
      z = z.array().tanh().matrix();
    return z;
  }

  Mat act_prime(const Mat& out) const {
    if (arch.hidden == Activation::relu) return (out.array() > S(0)).template cast<S>().matrix();
    return (S(1) - out.array().square()).matrix();
  }
};

using FieldNetworkF = FieldNetwork<float>;
using FieldNetworkD = FieldNetwork<double>;
using LatentCodes = LatentCodesT<float>;

// ---------------------------------------------------------------------------
// Rendering.

/// Riemann sum of an arbitrary density callback (world position -> 1/mm) over
/// the projector's samples.
template <class F>
double render_ray_with(F&& density, const Ray& r, const SamplerConfig& cfg) {
  std::vector<double> t;
  const double dt = sample_ray(r, cfg, t);
  double acc = 0.0;
  for (double ti : t) acc += density(r.at(ti));
  return acc * dt;
}

namespace detail {

inline constexpr std::size_t kRaysPerChunk = 32;

/// Samples of a chunk of rays, encoded for the network.
template <class S>
struct ChunkSamples {
  typename FieldNetwork<S>::Mat enc;
  std::vector<int> ray_of;    // local ray index of each sample column
  std::vector<double> dt;     // per local ray
};

template <class S>
ChunkSamples<S> gather_samples(const FieldNetwork<S>& net, std::span<const Ray> rays, const SamplerConfig& cfg) {
  ChunkSamples<S> cs;
  cs.dt.assign(rays.size(), 0.0);
  std::vector<Vec3> pts;
  std::vector<double> t;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    cs.dt[r] = sample_ray(rays[r], cfg, t);
    for (double ti : t) {
      const Vec3 x = net.normalize(rays[r].at(ti));
      if (x.cwiseAbs().maxCoeff() > 1.0) continue;
      pts.push_back(x);
      cs.ray_of.push_back(static_cast<int>(r));
    }
  }
  const int pd = net.arch.pos.out_dim(3);
  cs.enc.resize(pd, static_cast<int>(pts.size()));
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const S xs[3] = {S(pts[k][0]), S(pts[k][1]), S(pts[k][2])};
    encode_into(xs, 3, net.arch.pos, cs.enc.col(static_cast<int>(k)).data());
  }
  return cs;
}

inline std::size_t chunk_count(std::size_t n) { return (n + kRaysPerChunk - 1) / kRaysPerChunk; }

}  // namespace detail

template <class S>
std::vector<double> render_rays(const FieldNetwork<S>& net, const LatentCodesT<S>& codes, std::span<const Ray> rays,
                                const Pose& pose, const SamplerConfig& cfg) {
  cfg.validate();
  net.check_codes(codes);
  std::vector<double> out(rays.size(), 0.0);
  const auto dir = net.encode_pose(pose);
  parallel_for(detail::chunk_count(rays.size()), [&](std::size_t c) {
    const std::size_t lo = c * detail::kRaysPerChunk, hi = std::min(rays.size(), lo + detail::kRaysPerChunk);
    const auto cs = detail::gather_samples(net, rays.subspan(lo, hi - lo), cfg);
    if (cs.ray_of.empty()) return;
    const auto delta = net.forward(cs.enc, dir, codes, nullptr);
    std::vector<double> acc(hi - lo, 0.0);
    for (std::size_t k = 0; k < cs.ray_of.size(); ++k) acc[cs.ray_of[k]] += static_cast<double>(delta[k]);
    for (std::size_t r = 0; r < acc.size(); ++r) out[lo + r] = acc[r] * cs.dt[r];
  });
  return out;
}

template <class S>
double render_ray(const FieldNetwork<S>& net, const Ray& r, const SamplerConfig& cfg, const Pose& pose,
                  const LatentCodesT<S>& codes) {
  return render_rays(net, codes, std::span<const Ray>(&r, 1), pose, cfg)[0];
}

/// Full detector render (det_nv x det_nu).
template <class S>
Image2 render_projection(const FieldNetwork<S>& net, const Geometry& g, const Pose& p, const LatentCodesT<S>& codes,
                         const SamplerConfig& cfg) {
  g.validate();
  const auto rays = rays_full(g, p, net.box);
  Image2 img = Image2::zeros(g.det_nv, g.det_nu, {g.dv_mm, g.du_mm});
  img.data = render_rays(net, codes, rays, p, cfg);
  return img;
}

// ---------------------------------------------------------------------------
// Loss and gradients.

struct LossWeights {
  double percep = 0.3;  // (1 - MS-SSIM) on contiguous patches
  double psnr = 0.1;    // -PSNR
  double data = 0.3;    // MSE
  double scale = 1.0;   // predictions and targets are divided by this first
  double eps = 1e-12;   // RMSE clamp inside PSNR
};

/// Rays with their target line integrals. When patch_h * patch_w equals the
/// ray count the rays are a row-major contiguous patch.
struct RayBatch {
  std::vector<Ray> rays;
  std::vector<double> targets;
  Pose pose;
  int patch_h = 0;
  int patch_w = 0;

  bool is_patch() const {
    return patch_h > 0 && patch_w > 0 && static_cast<std::size_t>(patch_h) * patch_w == rays.size();
  }
};

struct LossTerms {
  double total = 0.0;
  double percep_term = 0.0;
  double psnr_term = 0.0;
  double data_term = 0.0;
  double mse = 0.0;
  double psnr_db = 0.0;
  double ms_ssim = 0.0;
  bool patch_term = false;
  bool redistributed = false;  // perceptual weight moved onto MSE
  std::vector<double> predictions;
};

template <class S>
struct FieldGradients {
  std::vector<S> params, z_sh, z_a;

  void reset(const FieldNetwork<S>& net) {
    params.assign(net.n_params(), S(0));
    z_sh.assign(static_cast<std::size_t>(net.arch.m_sh), S(0));
    z_a.assign(static_cast<std::size_t>(net.arch.m_a), S(0));
  }
};

template <class S>
LossTerms loss_and_grad(const FieldNetwork<S>& net, const LatentCodesT<S>& codes, const RayBatch& batch,
                        const LossWeights& w, const SamplerConfig& cfg, FieldGradients<S>* grad) {
  using RowVec = typename FieldNetwork<S>::RowVec;
  cfg.validate();
  net.check_codes(codes);
  if (batch.rays.empty()) throw InvalidArgument("empty ray batch");
  if (batch.targets.size() != batch.rays.size()) throw InvalidArgument("target count differs from ray count");
  if (!(w.scale > 0.0)) throw InvalidArgument("loss scale must be positive");
  const std::size_t n = batch.rays.size();
  const std::size_t nc = detail::chunk_count(n);
  const auto dir = net.encode_pose(batch.pose);
  const std::span<const Ray> rays(batch.rays);

  std::vector<detail::ChunkSamples<S>> samples(nc);
  std::vector<typename FieldNetwork<S>::Cache> caches(nc);
  std::vector<double> pred(n, 0.0);
  parallel_for(nc, [&](std::size_t c) {
    const std::size_t lo = c * detail::kRaysPerChunk, hi = std::min(n, lo + detail::kRaysPerChunk);
    samples[c] = detail::gather_samples(net, rays.subspan(lo, hi - lo), cfg);
    const auto& cs = samples[c];
    if (cs.ray_of.empty()) return;
    const auto delta = net.forward(cs.enc, dir, codes, grad ? &caches[c] : nullptr);
    for (std::size_t k = 0; k < cs.ray_of.size(); ++k) pred[lo + cs.ray_of[k]] += static_cast<double>(delta[k]);
    for (std::size_t r = lo; r < hi; ++r) pred[r] *= cs.dt[r - lo];
  });

  LossTerms t;
  t.predictions = pred;
  const double inv_scale = 1.0 / w.scale;
  std::vector<double> p(n), y(n), dp(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    p[k] = pred[k] * inv_scale;
    y[k] = batch.targets[k] * inv_scale;
  }
  double sq = 0.0;
  for (std::size_t k = 0; k < n; ++k) sq += (p[k] - y[k]) * (p[k] - y[k]);
  t.mse = sq / static_cast<double>(n);
  const double r = std::sqrt(t.mse);
  t.psnr_db = psnr_from_rmse(r, 1.0, w.eps);

  double w_percep = w.percep, w_data = w.data;
  const bool patch_ok = batch.is_patch() && std::min(batch.patch_h, batch.patch_w) >= SsimConfig{}.window;
  if (w_percep != 0.0 && !patch_ok) {
    w_data += w_percep;
    w_percep = 0.0;
    t.redistributed = true;
  }
  if (w_percep != 0.0) {
    Image2 P = Image2::zeros(batch.patch_h, batch.patch_w), Y = Image2::zeros(batch.patch_h, batch.patch_w);
    P.data = p;
    Y.data = y;
    std::vector<double> g;
    t.ms_ssim = ms_ssim_grad(P, Y, g).value;
    t.patch_term = true;
    t.percep_term = w_percep * (1.0 - t.ms_ssim);
    for (std::size_t k = 0; k < n; ++k) dp[k] -= w_percep * g[k];
  }
  t.psnr_term = -w.psnr * t.psnr_db;
  if (w.psnr != 0.0 && r > w.eps) {
    const double f = w.psnr * 20.0 / std::log(10.0) / (static_cast<double>(n) * t.mse);
    for (std::size_t k = 0; k < n; ++k) dp[k] += f * (p[k] - y[k]);
  }
  t.data_term = w_data * t.mse;
  for (std::size_t k = 0; k < n; ++k) dp[k] += w_data * 2.0 * (p[k] - y[k]) / static_cast<double>(n);
  t.total = t.percep_term + t.psnr_term + t.data_term;
  if (!std::isfinite(t.percep_term)) throw NumericalError("non-finite loss term: perceptual (1 - MS-SSIM)");
  if (!std::isfinite(t.psnr_term)) throw NumericalError("non-finite loss term: PSNR");
  if (!std::isfinite(t.data_term)) throw NumericalError("non-finite loss term: MSE");

  if (grad) {
    grad->reset(net);
    std::vector<FieldGradients<S>> partial(nc);
    parallel_for(nc, [&](std::size_t c) {
      const auto& cs = samples[c];
      if (cs.ray_of.empty()) return;
      const std::size_t lo = c * detail::kRaysPerChunk;
      partial[c].reset(net);
      RowVec up(static_cast<int>(cs.ray_of.size()));
      for (std::size_t k = 0; k < cs.ray_of.size(); ++k) {
        const int rr = cs.ray_of[k];
        up[static_cast<int>(k)] = static_cast<S>(dp[lo + rr] * inv_scale * cs.dt[rr]);
      }
      net.backward(caches[c], up, partial[c].params.data(), partial[c].z_sh.data(), partial[c].z_a.data());
    });
    for (std::size_t c = 0; c < nc; ++c) {
      if (partial[c].params.empty()) continue;
      for (std::size_t k = 0; k < grad->params.size(); ++k) grad->params[k] += partial[c].params[k];
      for (std::size_t k = 0; k < grad->z_sh.size(); ++k) grad->z_sh[k] += partial[c].z_sh[k];
      for (std::size_t k = 0; k < grad->z_a.size(); ++k) grad->z_a[k] += partial[c].z_a[k];
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Optimization.

struct RmsPropConfig {
  double lr = 5e-4;
  double decay = 0.99;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
    if (!(decay >= 0.0 && decay < 1.0)) throw InvalidArgument("RMSprop decay must lie in [0, 1)");
    if (!(eps > 0.0)) throw InvalidArgument("RMSprop epsilon must be positive");
  }
};

template <class S>
class RmsProp {
 public:
  explicit RmsProp(RmsPropConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  /// v = decay v + (1 - decay) g^2;  x -= lr g / (sqrt(v) + eps).
  void step(std::vector<S>& x, const std::vector<S>& g, std::size_t slot) {
    if (state_.size() <= slot) state_.resize(slot + 1);
    auto& v = state_[slot];
    if (v.size() != x.size()) v.assign(x.size(), S(0));
    const S d = static_cast<S>(cfg_.decay), lr = static_cast<S>(cfg_.lr), eps = static_cast<S>(cfg_.eps);
    for (std::size_t k = 0; k < x.size(); ++k) {
      v[k] = d * v[k] + (S(1) - d) * g[k] * g[k];
      x[k] -= lr * g[k] / (std::sqrt(v[k]) + eps);
    }
  }

  const RmsPropConfig& config() const { return cfg_; }

 private:
  RmsPropConfig cfg_;
  std::vector<std::vector<S>> state_;
};

struct FieldView {
  Pose pose;
  Image2 image;  // det_nv x det_nu line integrals
};

struct FitConfig {
  RmsPropConfig optimizer;
  int patch_size = 16;  // rays per step = patch_size^2, drawn as one contiguous patch
  int max_iters = 5000;
  double stop_psnr = 25.0;
  LossWeights weights{0.3, 0.1, 0.3};
  SamplerConfig sampler{64, true, 0};
  int eval_every = 50;
  std::uint64_t seed = 0;

  void validate() const {
    optimizer.validate();
    sampler.validate();
    if (patch_size < 1) throw InvalidArgument("patch size must be positive");
    if (max_iters < 0) throw InvalidArgument("max_iters must be >= 0");
    if (!std::isfinite(stop_psnr)) throw InvalidArgument("stop_psnr must be finite");
    if (eval_every < 1) throw InvalidArgument("eval_every must be positive");
  }
};

struct FitLogEntry {
  int iter = 0;
  double loss = 0.0;
  double psnr = 0.0;  // batch PSNR on normalized values
  double lr = 0.0;
};

struct FitEval {
  int iter = 0;
  double mean_psnr = 0.0;  // full-view PSNR averaged over the evaluation views
};

struct FitResult {
  std::vector<FitLogEntry> log;
  std::vector<FitEval> evals;
  bool reached = false;
  int iterations = 0;
  double scale = 1.0;
  bool redistributed = false;
};

/// Mean full-view PSNR of the field against the views, values divided by
/// `scale` (dynamic range 1).
template <class S>
double mean_view_psnr(const FieldNetwork<S>& net, const LatentCodesT<S>& codes, const Geometry& g,
                      const std::vector<FieldView>& views, double scale, const SamplerConfig& cfg) {
  double acc = 0.0;
  for (const auto& v : views) {
    const Image2 r = render_projection(net, g, v.pose, codes, cfg);
    acc += psnr_from_rmse(rmse(r.data, v.image.data) / scale, 1.0);
  }
  return acc / static_cast<double>(views.size());
}

namespace detail {
template <class S>
void check_finite(const std::vector<S>& v, const char* what, int iter) {
  for (S x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericalError(std::string("non-finite ") + what + " at iteration " + std::to_string(iter));
}
}  // namespace detail

/// Fits weights and latent codes to the views. Each iteration draws one view
/// and one contiguous patch; targets at the patch samples are read from the
/// view by bilinear lookup. Every eval_every iterations the mean full-view
/// PSNR is measured and the fit stops once it reaches stop_psnr. The PSNR is
/// taken over `held_out` when given, otherwise over the training views.
template <class S>
FitResult fit(FieldNetwork<S>& net, LatentCodesT<S>& codes, const std::vector<FieldView>& views, const Geometry& g,
              const FitConfig& cfg, const std::function<void(const FitLogEntry&)>& on_iter = {},
              const std::vector<FieldView>& held_out = {}) {
  cfg.validate();
  g.validate();
  net.check_codes(codes);
  if (views.empty()) throw InvalidArgument("fit needs at least one view");
  for (const auto* set : {&views, &held_out})
    for (const auto& v : *set)
      if (v.image.height != g.det_nv || v.image.width != g.det_nu)
        throw InvalidArgument("view image does not match the detector");
  const int m = std::min({cfg.patch_size, g.det_nu, g.det_nv});

  FitResult res;
  double mx = 0.0;
  for (const auto& v : views)
    for (double x : v.image.data) mx = std::max(mx, std::abs(x));
  res.scale = mx > 0.0 ? mx : 1.0;
  LossWeights w = cfg.weights;
  w.scale = res.scale;

  std::mt19937_64 rng(cfg.seed);
  RmsProp<S> opt(cfg.optimizer);
  FieldGradients<S> grad;
  SamplerConfig eval_sampler = cfg.sampler;
  eval_sampler.seed = hash_combine(cfg.seed, 0xe7a1ULL);

  for (int it = 1; it <= cfg.max_iters; ++it) {
    const auto& view = views[static_cast<std::size_t>(uniform_index(rng, static_cast<int>(views.size())))];
    const PatchSpec patch = sample_patch_spec(rng, m, g);
    RayBatch batch;
    batch.pose = view.pose;
    batch.rays = rays_for_patch(g, view.pose, patch, net.box);
    batch.patch_h = batch.patch_w = m;
    batch.targets.resize(batch.rays.size());
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b) {
        const auto [row, col] = patch_sample_coords(g, patch, a, b);
        batch.targets[static_cast<std::size_t>(a) * m + b] = sample_bilinear_clamped(view.image, row, col);
      }
    SamplerConfig sc = cfg.sampler;
    sc.seed = hash_combine(cfg.sampler.seed, static_cast<std::uint64_t>(it));
    const LossTerms t = loss_and_grad(net, codes, batch, w, sc, &grad);
    res.redistributed = res.redistributed || t.redistributed;
    opt.step(net.params, grad.params, 0);
    opt.step(codes.z_sh, grad.z_sh, 1);
    opt.step(codes.z_a, grad.z_a, 2);
    detail::check_finite(net.params, "network parameters", it);
    detail::check_finite(codes.z_sh, "shape code", it);
    detail::check_finite(codes.z_a, "appearance code", it);
    res.log.push_back({it, t.total, t.psnr_db, cfg.optimizer.lr});
    res.iterations = it;
    if (on_iter) on_iter(res.log.back());
    if (it % cfg.eval_every == 0 || it == cfg.max_iters) {
      const double ps = mean_view_psnr(net, codes, g, held_out.empty() ? views : held_out, res.scale, eval_sampler);
      res.evals.push_back({it, ps});
      if (ps >= cfg.stop_psnr) {
        res.reached = true;
        break;
      }
    }
  }
  return res;
}

/// Grid evaluation of delta at the voxel centers of a dims lattice spanning
/// the field's box. The direction input is fixed to `pose_for_dir`,
/// canonically (0, 0).
template <class S>
Volume extract_volume(const FieldNetwork<S>& net, const LatentCodesT<S>& codes, std::array<int, 3> dims,
                      const Pose& pose_for_dir = Pose{}) {
  net.check_codes(codes);
  const Vec3 ext = net.box.hi - net.box.lo;
  Volume v = Volume::zeros(dims, {ext.z() / dims[0], ext.y() / dims[1], ext.x() / dims[2]});
  const auto dir = net.encode_pose(pose_for_dir);
  const int pd = net.arch.pos.out_dim(3);
  parallel_for(static_cast<std::size_t>(dims[0]), [&](std::size_t kk) {
    const int k = static_cast<int>(kk);
    const int per = dims[1] * dims[2];
    typename FieldNetwork<S>::Mat enc(pd, per);
    for (int i = 0; i < dims[1]; ++i)
      for (int j = 0; j < dims[2]; ++j) {
        const Vec3 x = net.normalize(v.voxel_center(k, i, j) + net.box.center());
        const S xs[3] = {S(x[0]), S(x[1]), S(x[2])};
        encode_into(xs, 3, net.arch.pos, enc.col(i * dims[2] + j).data());
      }
    const auto delta = net.forward(enc, dir, codes, nullptr);
    for (int q = 0; q < per; ++q) v.data[v.index(k, 0, 0) + q] = static_cast<double>(delta[q]);
  });
  return v;
}

// ---------------------------------------------------------------------------
// Checkpoints: RVF1 header with a layer manifest, flat payload
// params ++ z_sh ++ z_a.

template <class S>
void save_field(const std::filesystem::path& path, const FieldNetwork<S>& net, const LatentCodesT<S>& codes) {
  net.check_codes(codes);
  RvfRecord r;
  r.tag = "field";
  r.data.reserve(net.n_params() + codes.z_sh.size() + codes.z_a.size());
  for (S x : net.params) r.data.push_back(static_cast<double>(x));
  for (S x : codes.z_sh) r.data.push_back(static_cast<double>(x));
  for (S x : codes.z_a) r.data.push_back(static_cast<double>(x));
  r.dims = {static_cast<int>(r.data.size())};
  r.spacing_mm = {1.0};
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& L : net.layers)
    layers.push_back({{"name", L.name}, {"in", L.in}, {"out", L.out}, {"w_off", L.w_off}, {"b_off", L.b_off}});
  r.extra["arch"] = net.arch.to_json();
  r.extra["layers"] = layers;
  r.extra["n_params"] = net.n_params();
  r.extra["box_lo"] = {net.box.lo.x(), net.box.lo.y(), net.box.lo.z()};
  r.extra["box_hi"] = {net.box.hi.x(), net.box.hi.y(), net.box.hi.z()};
  save_rvf(path, r, sizeof(S) == 4 ? DType::f32le : DType::f64le);
}

template <class S>
std::pair<FieldNetwork<S>, LatentCodesT<S>> load_field(const std::filesystem::path& path) {
  const RvfRecord r = load_rvf(path);
  if (r.tag != "field") throw FormatError("'" + path.string() + "' is not a field checkpoint");
  try {
    const FieldArch arch = FieldArch::from_json(r.extra.at("arch"));
    const auto lo = r.extra.at("box_lo").get<std::vector<double>>();
    const auto hi = r.extra.at("box_hi").get<std::vector<double>>();
    FieldNetwork<S> net = FieldNetwork<S>::create(arch, 0, true, Box{Vec3(lo[0], lo[1], lo[2]), Vec3(hi[0], hi[1], hi[2])});
    const auto& manifest = r.extra.at("layers");
    if (manifest.size() != net.layers.size()) throw FormatError("layer manifest does not match the architecture");
    for (std::size_t l = 0; l < net.layers.size(); ++l)
      if (manifest[l].at("in").get<int>() != net.layers[l].in || manifest[l].at("out").get<int>() != net.layers[l].out ||
          manifest[l].at("w_off").get<std::size_t>() != net.layers[l].w_off)
        throw FormatError("layer manifest entry " + std::to_string(l) + " does not match the architecture");
    const std::size_t np = net.n_params();
    if (r.data.size() != np + static_cast<std::size_t>(arch.m_sh + arch.m_a))
      throw FormatError("checkpoint payload length does not match the architecture");
    LatentCodesT<S> codes;
    for (std::size_t k = 0; k < np; ++k) net.params[k] = static_cast<S>(r.data[k]);
    for (int k = 0; k < arch.m_sh; ++k) codes.z_sh.push_back(static_cast<S>(r.data[np + k]));
    for (int k = 0; k < arch.m_a; ++k) codes.z_a.push_back(static_cast<S>(r.data[np + arch.m_sh + k]));
    return {std::move(net), std::move(codes)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad field checkpoint header in '" + path.string() + "': " + e.what());
  }
}

}  // namespace tomokit
