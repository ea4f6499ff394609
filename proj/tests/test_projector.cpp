#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "tomokit/pipeline_dect.hpp"
#include "tomokit/projector.hpp"

using namespace tomokit;

namespace {

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

// Random rays through a ball of radius `reach` around the origin, starting
// 300 mm away.
std::vector<Ray> random_rays(std::mt19937_64& rng, int n, double reach, const Box& box) {
  std::vector<Ray> rays;
  while (static_cast<int>(rays.size()) < n) {
    Vec3 d(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    d.normalize();
    const Vec3 u = d.unitOrthogonal(), w = d.cross(u);
    const double ang = uniform(rng, 0, 2 * kPi), b = reach * std::sqrt(uniform01(rng));
    const Vec3 p = b * (std::cos(ang) * u + std::sin(ang) * w);
    rays.push_back(make_ray(p - 300.0 * d, p, box, static_cast<std::uint64_t>(rays.size())));
  }
  return rays;
}

Volume gaussian_blob(int n, double sigma, double amp) {
  Volume v = Volume::zeros({n, n, n});
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) v.at(k, i, j) = amp * std::exp(-v.voxel_center(k, i, j).squaredNorm() / (2 * sigma * sigma));
  return v;
}

SpectralModel three_bin_model(std::mt19937_64& rng) {
  std::array<std::vector<double>, 2> sens{oracle::random_vector(rng, 3, 0.1, 1.0),
                                          oracle::random_vector(rng, 3, 0.1, 1.0)};
  std::vector<std::vector<double>> mu{oracle::random_vector(rng, 3, 0.01, 0.1),
                                      oracle::random_vector(rng, 3, 0.01, 0.3)};
  return SpectralModel({40, 50, 60}, sens, {"a", "b"}, mu);
}

MaterialSinograms path_sinograms(const std::vector<std::vector<double>>& paths) {
  Geometry g;
  g.det_nu = static_cast<int>(paths[0].size());
  g.det_nv = 1;
  MaterialSinograms ms;
  for (std::size_t m = 0; m < paths.size(); ++m) {
    Sinogram s = Sinogram::zeros(g, {0.0}, SinoStage::line_integral);
    s.data = paths[m];
    ms.names.push_back(m == 0 ? "a" : "b");
    ms.sinos.push_back(s);
  }
  return ms;
}

}  // namespace

TEST(LineIntegral, ZeroVolumeGivesZero) {
  const Volume v = Volume::zeros({16, 16, 16});
  std::mt19937_64 rng(1);
  for (const Ray& r : random_rays(rng, 20, 8, v.bounds())) EXPECT_EQ(line_integral(v, r, SamplerConfig{}), 0.0);
}

TEST(LineIntegral, CubeCentralChord) {
  const Volume v = make_cube_phantom(128);  // side 64 mm
  const Ray r = make_ray(Vec3(0.3, -500, 0.2), Vec3(0.3, 0, 0.2), v.bounds());
  EXPECT_NEAR(line_integral(v, r, SamplerConfig{256, true, 0}) / 64.0, 1.0, 0.005);
}

TEST(LineIntegral, SphereChordOracleAndRefinement) {
  const double R = 40.0;
  const Ellipsoid e{Vec3::Zero(), Vec3::Constant(R), 1.0, false};
  const Volume v = make_ellipsoid_phantom(std::span(&e, 1), {128, 128, 128}, {1, 1, 1}, 4);
  std::mt19937_64 rng(5);
  const auto rays = random_rays(rng, 100, 0.9 * R, v.bounds());
  auto med = [&](int q) {
    std::vector<double> err;
    for (const Ray& r : rays) {
      const double truth = oracle::sphere_chord(r.origin, r.direction, Vec3::Zero(), R);
      err.push_back(std::abs(line_integral(v, r, SamplerConfig{q, true, 1}) - truth) / truth);
    }
    return median(err);
  };
  const double e256 = med(256), e512 = med(512);
  EXPECT_LT(e256, 0.005);
  EXPECT_LT(e512, e256);
}

TEST(LineIntegral, GaussianBlobErrorShrinksWithSamples) {
  const double sigma = 10.0, amp = 1.0;
  const Volume v = gaussian_blob(96, sigma, amp);
  std::mt19937_64 rng(6);
  const auto rays = random_rays(rng, 100, 2 * sigma, v.bounds());
  auto med = [&](int q) {
    std::vector<double> err;
    for (const Ray& r : rays) {
      const double b2 = (r.origin - r.origin.dot(r.direction) * r.direction).squaredNorm();
      const double truth = amp * std::sqrt(2 * kPi) * sigma * std::exp(-b2 / (2 * sigma * sigma));
      err.push_back(std::abs(line_integral(v, r, SamplerConfig{q, true, 2}) - truth));
    }
    return median(err);
  };
  const double e16 = med(16), e32 = med(32), e64 = med(64);
  EXPECT_LT(e32, e16);
  EXPECT_LT(e64, e32);
}

TEST(LineIntegral, LinearInVoxelValues) {
  std::mt19937_64 rng(7);
  Volume a = Volume::zeros({12, 12, 12}), b = a, c = a;
  a.data = oracle::random_vector(rng, a.size());
  b.data = oracle::random_vector(rng, b.size());
  for (std::size_t k = 0; k < c.size(); ++k) c.data[k] = 2.0 * a.data[k] - 0.5 * b.data[k];
  for (const Ray& r : random_rays(rng, 20, 5, a.bounds())) {
    const SamplerConfig cfg{64, true, 3};
    EXPECT_NEAR(line_integral(c, r, cfg), 2.0 * line_integral(a, r, cfg) - 0.5 * line_integral(b, r, cfg), 1e-10);
  }
}

TEST(Sampler, MidpointAndStratifiedReproducibility) {
  Ray r;
  r.origin = Vec3::Zero();
  r.direction = Vec3::UnitX();
  r.t_near = 1.0;
  r.t_far = 5.0;
  r.key = 42;
  std::vector<double> t;
  EXPECT_DOUBLE_EQ(sample_ray(r, SamplerConfig{4, false, 0}, t), 1.0);
  EXPECT_EQ(t, (std::vector<double>{1.5, 2.5, 3.5, 4.5}));

  std::vector<double> a, b, c;
  sample_ray(r, SamplerConfig{16, true, 9}, a);
  sample_ray(r, SamplerConfig{16, true, 9}, b);
  sample_ray(r, SamplerConfig{16, true, 10}, c);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (int i = 0; i < 16; ++i) {
    EXPECT_GE(a[i], 1.0 + i * 0.25);
    EXPECT_LT(a[i], 1.0 + (i + 1) * 0.25);
  }
  Ray empty;
  EXPECT_EQ(sample_ray(empty, SamplerConfig{}, t), 0.0);
  EXPECT_TRUE(t.empty());
  EXPECT_THROW(SamplerConfig({1, true, 0}).validate(), InvalidArgument);
}

TEST(Project, ShapeZeroAndLinearity) {
  Geometry g;
  g.d1_mm = 300;
  g.d2_mm = 450;
  g.det_nu = g.det_nv = 128;
  const Volume zero = Volume::zeros({128, 128, 128});
  const Image2 p0 = project(zero, g, Pose{}, SamplerConfig{32, true, 0});
  EXPECT_EQ(p0.height, 128);
  EXPECT_EQ(p0.width, 128);
  for (double x : p0.data) EXPECT_EQ(x, 0.0);

  g.det_nu = g.det_nv = 24;
  Volume v = make_two_sphere_phantom(24);
  Volume v3 = v;
  for (double& x : v3.data) x *= 3.0;
  const SamplerConfig cfg{64, true, 1};
  const Image2 a = project(v, g, Pose::make(0.3, 0.1), cfg), b = project(v3, g, Pose::make(0.3, 0.1), cfg);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(b.data[k], 3.0 * a.data[k], 1e-9);
  const Image2 t = project(v, g, Pose::make(0.3, 0.1), cfg, true);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(t.data[k], std::exp(-a.data[k]), 1e-12);
}

TEST(Project, PatchIsCropOfFullProjection) {
  Geometry g;
  g.d1_mm = 200;
  g.d2_mm = 300;
  g.det_nu = g.det_nv = 64;
  g.du_mm = g.dv_mm = 1.0;
  const Volume v = make_two_sphere_phantom(32);
  const SamplerConfig cfg{128, true, 4};
  const Pose pose = Pose::make(1.0, 0.2);
  const Image2 full = project(v, g, pose, cfg);
  PatchSpec p;
  p.size = 32;
  p.u[0] = 24.0 / 64.0;  // columns 8..39
  p.u[1] = 40.0 / 64.0;  // rows 24..55
  const Image2 patch = project_patch(v, g, pose, p, cfg);
  ASSERT_EQ(patch.height, 32);
  ASSERT_EQ(patch.width, 32);
  for (int a = 0; a < 32; ++a)
    for (int b = 0; b < 32; ++b) EXPECT_NEAR(patch.at(a, b), full.at(24 + a, 8 + b), 1e-6);
}

TEST(FanBeam, ZeroMapAndDectDimensions) {
  DectRunConfig dc;
  const Geometry g = dc.geometry();
  const Image2 zero = Image2::zeros(64, 64, {0.2, 0.2});
  const Sinogram s = sinogram_fan_2d(zero, g, dc.n_views);
  EXPECT_EQ(s.n_views, 256);
  EXPECT_EQ(s.n_det, 1024);
  for (double x : s.data) EXPECT_EQ(x, 0.0);
}

TEST(FanBeam, DiskSilhouetteWidth) {
  Geometry g;
  g.d1_mm = 500;
  g.d2_mm = 800;
  g.det_nu = 256;
  g.det_nv = 1;
  g.du_mm = 1.0;
  const double R = 25.0;
  const Ellipse disk{0, 0, R, R, 0, 1.0, false};
  const Image2 img = make_ellipse_phantom_2d(std::span(&disk, 1), 128, 128, 0.5, 4);
  const Sinogram s = sinogram_fan_2d(img, g, 12);
  for (int v = 0; v < s.n_views; ++v) {
    double peak = 0.0;
    for (int d = 0; d < s.n_det; ++d) peak = std::max(peak, s.at(v, d));
    int first = -1, last = -1;
    for (int d = 0; d < s.n_det; ++d)
      if (s.at(v, d) > 0.01 * peak) {
        if (first < 0) first = d;
        last = d;
      }
    const double width = (last - first + 1) * g.du_mm;
    const double tangent = 2 * R * g.d2_mm / std::sqrt(g.d1_mm * g.d1_mm - R * R);
    // Detector quantization plus the bilinear footprint of an edge pixel,
    // at most one detector pixel per side.
    EXPECT_NEAR(width, tangent, 2.0 * g.du_mm) << "view " << v;
  }
}

TEST(FanBeam, AdjointIdentity) {
  Geometry g;
  g.d1_mm = 150;
  g.d2_mm = 250;
  g.det_nu = 96;
  g.det_nv = 1;
  g.du_mm = 1.2;
  const FanProjector2D proj(g, uniform_angles(45), 64, 64, {1.0, 1.0});
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    Image2 x = oracle::random_image(rng, 64, 64, -1, 1);
    Sinogram y = proj.blank_sinogram();
    y.data = oracle::random_vector(rng, y.data.size(), -1, 1);
    const Sinogram ax = proj.forward(x);
    const Image2 aty = proj.back(y);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t k = 0; k < y.data.size(); ++k) lhs += ax.data[k] * y.data[k];
    for (std::size_t k = 0; k < x.size(); ++k) rhs += x.data[k] * aty.data[k];
    EXPECT_LT(std::abs(lhs - rhs) / std::abs(lhs), 1e-4);
  }
}

TEST(FanBeam, RejectsConeGeometry) {
  Geometry g;
  g.det_nv = 4;
  EXPECT_THROW(FanProjector2D(g, {0.0}, 8, 8, {1, 1}), InvalidArgument);
}

TEST(Spectral, ZeroPathIsExactlyOne) {
  std::mt19937_64 rng(9);
  const SpectralModel m = three_bin_model(rng);
  const auto ms = path_sinograms({{0, 0, 0}, {0, 0, 0}});
  for (Channel c : {Channel::low, Channel::high}) {
    const Sinogram t = spectral_transmission(ms, m, c);
    EXPECT_EQ(t.stage, SinoStage::transmission);
    for (double x : t.data) EXPECT_EQ(x, 1.0);
  }
}

TEST(Spectral, SingleBinIsBeerLambert) {
  const SpectralModel m({60}, {std::vector<double>{1.0}, std::vector<double>{2.0}}, {"a", "b"},
                        {{0.02}, {0.3}});
  const auto ms = path_sinograms({{0, 1, 10, 50}, {3, 0, 2, 0.5}});
  const Sinogram t = spectral_transmission(ms, m, Channel::high);
  for (int d = 0; d < 4; ++d)
    EXPECT_NEAR(t.data[d], std::exp(-(0.02 * ms.sinos[0].data[d] + 0.3 * ms.sinos[1].data[d])), 1e-15);
}

TEST(Spectral, MatchesDirectSummation) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const SpectralModel m = three_bin_model(rng);
    const auto pa = oracle::random_vector(rng, 50, 0, 40), pb = oracle::random_vector(rng, 50, 0, 10);
    const auto ms = path_sinograms({pa, pb});
    for (Channel c : {Channel::low, Channel::high}) {
      const Sinogram t = spectral_transmission(ms, m, c);
      std::vector<std::vector<double>> mu{m.mu("a"), m.mu("b")};
      for (int d = 0; d < 50; ++d) {
        const double ref = oracle::transmission(m.sensitivity(c), mu, {pa[d], pb[d]});
        EXPECT_NEAR(t.data[d], ref, 1e-12);
        EXPECT_GT(t.data[d], 0.0);
        EXPECT_LE(t.data[d], 1.0);
      }
    }
  }
}

TEST(Spectral, StrictlyDecreasingInEachPath) {
  std::mt19937_64 rng(11);
  const SpectralModel m = three_bin_model(rng);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = uniform(rng, 0, 30), b = uniform(rng, 0, 10), h = 1e-3;
    const auto base = spectral_transmission(path_sinograms({{a}, {b}}), m, Channel::low).data[0];
    EXPECT_LT(spectral_transmission(path_sinograms({{a + h}, {b}}), m, Channel::low).data[0], base);
    EXPECT_LT(spectral_transmission(path_sinograms({{a}, {b + h}}), m, Channel::low).data[0], base);
  }
}

TEST(Spectral, RejectsWrongStageAndUnknownMaterial) {
  std::mt19937_64 rng(12);
  const SpectralModel m = three_bin_model(rng);
  auto ms = path_sinograms({{1}, {1}});
  ms.sinos[0].stage = SinoStage::transmission;
  EXPECT_THROW(spectral_transmission(ms, m, Channel::low), InvalidArgument);
  auto unknown = path_sinograms({{1}, {1}});
  unknown.names[1] = "bone";
  EXPECT_THROW(spectral_transmission(unknown, m, Channel::low), InvalidArgument);
}

TEST(LogTransform, ValuesAndRoundTrip) {
  Geometry g;
  g.det_nu = 3;
  g.det_nv = 1;
  Sinogram t = Sinogram::zeros(g, {0.0}, SinoStage::transmission);
  t.data = {1.0, std::exp(-2.0), 0.5};
  const Sinogram p = log_transform(t);
  EXPECT_EQ(p.stage, SinoStage::log_transmission);
  EXPECT_EQ(p.data[0], 0.0);
  EXPECT_NEAR(p.data[1], 2.0, 1e-15);

  const SpectralModel mono({50}, {std::vector<double>{1}, std::vector<double>{1}}, {"a", "b"}, {{0.05}, {0.2}});
  std::mt19937_64 rng(13);
  const auto pa = oracle::random_vector(rng, 30, 0, 50), pb = oracle::random_vector(rng, 30, 0, 5);
  const Sinogram back = log_transform(spectral_transmission(path_sinograms({pa, pb}), mono, Channel::low));
  for (int d = 0; d < 30; ++d) EXPECT_NEAR(back.data[d], 0.05 * pa[d] + 0.2 * pb[d], 1e-12);

  t.data[2] = 0.0;
  EXPECT_THROW(log_transform(t), InvalidArgument);
  EXPECT_THROW(log_transform(p), InvalidArgument);
}
