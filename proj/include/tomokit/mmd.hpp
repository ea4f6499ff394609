#pragma once

// Image-domain dual-energy multi-material decomposition with volume
// conservation. For a triplet (m1, m2, m3) each pixel solves
//
//   [ mu_low(m1)  mu_low(m2)  mu_low(m3)  ] [f1]   [a_low ]
//   [ mu_high(m1) mu_high(m2) mu_high(m3) ] [f2] = [a_high]
//   [ 1           1           1           ] [f3]   [1     ]
//
// and the best feasible triplet wins.
//
// Library file format ('#' comments):
//
//   material <name> <mu_low_per_mm> <mu_high_per_mm>
//   material <name> auto        # effective mu from a spectral model
//   triplet  <name> <name> <name>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tomokit/core.hpp"
#include "tomokit/recon.hpp"
#include "tomokit/spectral.hpp"
#include "tomokit/volume.hpp"

namespace tomokit {

/// sum_E S_c(E) mu_m(E) dE with the normalized sensitivity.
inline double effective_mu(const SpectralModel& model, Channel c, const std::string& material) {
  const auto w = model.weights(c);
  const auto& mu = model.mu(material);
  double num = 0.0, den = 0.0;
  for (std::size_t e = 0; e < w.size(); ++e) {
    num += w[e] * mu[e];
    den += w[e];
  }
  return num / den;
}

struct MaterialMu {
  std::string name;
  double mu_low = 0.0;
  double mu_high = 0.0;
};

inline constexpr double kMaxTripletCondition = 1e8;

class TripletLibrary {
 public:
  TripletLibrary() = default;

  /// Validates every triplet's system matrix (condition number below 1e8).
  TripletLibrary(std::vector<MaterialMu> materials, std::vector<std::array<std::size_t, 3>> triplets)
      : materials_(std::move(materials)), triplets_(std::move(triplets)) {
    for (std::size_t i = 0; i < materials_.size(); ++i) {
      const auto& m = materials_[i];
      if (!std::isfinite(m.mu_low) || !std::isfinite(m.mu_high) || m.mu_low < 0.0 || m.mu_high < 0.0)
        throw InvalidArgument("material '" + m.name + "' needs finite, non-negative attenuation");
      for (std::size_t j = 0; j < i; ++j)
        if (materials_[j].name == m.name) throw InvalidArgument("duplicate material '" + m.name + "'");
    }
    for (std::size_t t = 0; t < triplets_.size(); ++t) {
      for (std::size_t id : triplets_[t])
        if (id >= materials_.size()) throw InvalidArgument("triplet refers to an unknown material");
      const double cond = condition(t);
      if (!(cond < kMaxTripletCondition))
        throw InvalidArgument("triplet " + triplet_name(t) + " is singular or ill-conditioned (cond " +
                              std::to_string(cond) + ")");
    }
  }

  const std::vector<MaterialMu>& materials() const { return materials_; }
  const std::vector<std::array<std::size_t, 3>>& triplets() const { return triplets_; }
  std::size_t size() const { return triplets_.size(); }
  bool empty() const { return triplets_.empty(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < materials_.size(); ++i)
      if (materials_[i].name == name) return i;
    return std::nullopt;
  }

  Eigen::Matrix3d system(std::size_t t) const {
    Eigen::Matrix3d A;
    for (int k = 0; k < 3; ++k) {
      const auto& m = materials_[triplets_[t][k]];
      A(0, k) = m.mu_low;
      A(1, k) = m.mu_high;
      A(2, k) = 1.0;
    }
    return A;
  }

  double condition(std::size_t t) const {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(system(t));
    const auto s = svd.singularValues();
    return s(2) > 0.0 ? s(0) / s(2) : std::numeric_limits<double>::infinity();
  }

  std::string triplet_name(std::size_t t) const {
    return "(" + materials_[triplets_[t][0]].name + ", " + materials_[triplets_[t][1]].name + ", " +
           materials_[triplets_[t][2]].name + ")";
  }

 private:
  std::vector<MaterialMu> materials_;
  std::vector<std::array<std::size_t, 3>> triplets_;
};

/// Parses a library file. `model` resolves `auto` attenuation entries.
inline TripletLibrary parse_triplet_library(std::istream& is, const SpectralModel* model = nullptr,
                                            const std::string& origin = "<stream>") {
  std::vector<MaterialMu> mats;
  std::vector<std::array<std::string, 3>> names;
  std::string line;
  int lineno = 0;
  auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    if (key == "material") {
      MaterialMu m;
      std::string lo;
      if (!(ss >> m.name >> lo)) throw FormatError(where() + "expected 'material NAME MU_LOW MU_HIGH' or 'material NAME auto'");
      if (lo == "auto") {
        if (!model) throw FormatError(where() + "'auto' attenuation needs a spectral model");
        if (m.name == "air") {
          m.mu_low = m.mu_high = 0.0;
        } else {
          m.mu_low = effective_mu(*model, Channel::low, m.name);
          m.mu_high = effective_mu(*model, Channel::high, m.name);
        }
      } else {
        std::string hi;
        if (!(ss >> hi)) throw FormatError(where() + "missing high-energy attenuation");
        try {
          m.mu_low = std::stod(lo);
          m.mu_high = std::stod(hi);
        } catch (const std::exception&) {
          throw FormatError(where() + "attenuation values must be numbers");
        }
      }
      mats.push_back(m);
    } else if (key == "triplet") {
      std::array<std::string, 3> t;
      if (!(ss >> t[0] >> t[1] >> t[2])) throw FormatError(where() + "triplet needs three material names");
      names.push_back(t);
    } else {
      throw FormatError(where() + "unknown key '" + key + "'");
    }
    std::string extra;
    if (ss >> extra) throw FormatError(where() + "trailing token '" + extra + "'");
  }
  std::vector<std::array<std::size_t, 3>> ids;
  for (const auto& t : names) {
    std::array<std::size_t, 3> id{};
    for (int k = 0; k < 3; ++k) {
      std::size_t i = 0;
      for (; i < mats.size() && mats[i].name != t[k]; ++i) {
      }
      if (i == mats.size()) throw FormatError(origin + ": triplet uses undeclared material '" + t[k] + "'");
      id[k] = i;
    }
    ids.push_back(id);
  }
  try {
    return TripletLibrary(std::move(mats), std::move(ids));
  } catch (const InvalidArgument& e) {
    throw FormatError(origin + ": " + e.what());
  }
}

inline TripletLibrary load_triplet_library(const std::filesystem::path& path, const SpectralModel* model = nullptr) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open triplet library '" + path.string() + "'");
  return parse_triplet_library(is, model, path.string());
}

struct MmdConfig {
  double fraction_tol = 1e-9;  // feasibility slack on [0, 1]
  double tie_tol = 1e-12;      // residuals closer than this count as equal

  void validate() const {
    if (!(fraction_tol >= 0.0) || !(tie_tol >= 0.0)) throw InvalidArgument("MMD tolerances must be >= 0");
  }
};

struct VoxelDecomposition {
  Eigen::Vector3d fractions = Eigen::Vector3d::Zero();
  bool feasible = false;
  double residual = 0.0;   // L2 mismatch on the two attenuation rows
  double violation = 0.0;  // distance of the fractions outside [0, 1]
};

inline VoxelDecomposition decompose_voxel(double a_low, double a_high, const Eigen::Matrix3d& A,
                                          double fraction_tol = 1e-9) {
  Eigen::FullPivLU<Eigen::Matrix3d> lu(A);
  if (!lu.isInvertible()) throw NumericalError("singular triplet system matrix");
  VoxelDecomposition d;
  d.fractions = lu.solve(Eigen::Vector3d(a_low, a_high, 1.0));
  const Eigen::Vector3d back = A * d.fractions;
  d.residual = std::hypot(back(0) - a_low, back(1) - a_high);
  d.feasible = true;
  for (int k = 0; k < 3; ++k) {
    const double f = d.fractions(k);
    if (f < -fraction_tol || f > 1.0 + fraction_tol) d.feasible = false;
    d.violation += std::max(0.0, -f) + std::max(0.0, f - 1.0);
  }
  return d;
}

inline VoxelDecomposition decompose_voxel(double a_low, double a_high, const TripletLibrary& lib, std::size_t t,
                                          double fraction_tol = 1e-9) {
  return decompose_voxel(a_low, a_high, lib.system(t), fraction_tol);
}

/// Clamps to [0, 1] and rescales so the fractions sum to one.
inline Eigen::Vector3d project_to_simplex_clamped(Eigen::Vector3d f) {
  f = f.cwiseMax(0.0).cwiseMin(1.0);
  const double s = f.sum();
  if (!(s > 0.0)) return Eigen::Vector3d::Constant(1.0 / 3.0);
  return f / s;
}

struct MmdResult {
  MaterialMaps maps;  // one map per library material, in library order
  std::vector<int> chosen_triplet;
  std::size_t infeasible_pixels = 0;
  double max_residual = 0.0;  // among feasible picks
};

/// Per pixel: solve every triplet, keep the feasible solution with the least
/// residual (ties to the lowest index). Pixels with no feasible triplet take
/// the least-violating solution, clamped and renormalized, and are counted.
inline MmdResult aa_mmd(const Image2& low, const Image2& high, const TripletLibrary& lib, const MmdConfig& cfg = {}) {
  cfg.validate();
  if (lib.empty()) throw InvalidArgument("triplet library is empty");
  if (!low.same_shape(high)) throw InvalidArgument("low/high attenuation images differ in shape");
  const std::size_t nt = lib.size();
  std::vector<Eigen::Matrix3d> inv(nt);
  std::vector<Eigen::Matrix3d> sys(nt);
  for (std::size_t t = 0; t < nt; ++t) {
    sys[t] = lib.system(t);
    Eigen::FullPivLU<Eigen::Matrix3d> lu(sys[t]);
    if (!lu.isInvertible()) throw NumericalError("singular triplet " + lib.triplet_name(t));
    inv[t] = lu.inverse();
  }
  MmdResult r;
  for (const auto& m : lib.materials()) {
    r.maps.names.push_back(m.name);
    r.maps.maps.push_back(Image2::zeros(low.height, low.width, low.spacing));
  }
  r.chosen_triplet.assign(low.size(), -1);
  std::vector<unsigned char> infeasible(low.size(), 0);
  std::vector<double> resid(low.size(), 0.0);
  parallel_for(static_cast<std::size_t>(low.height), [&](std::size_t i) {
    for (int j = 0; j < low.width; ++j) {
      const std::size_t p = i * static_cast<std::size_t>(low.width) + j;
      const Eigen::Vector3d b(low.data[p], high.data[p], 1.0);
      int best = -1, least = -1;
      double best_res = 0.0, least_viol = 0.0;
      Eigen::Vector3d best_f, least_f;
      for (std::size_t t = 0; t < nt; ++t) {
        const Eigen::Vector3d f = inv[t] * b;
        const Eigen::Vector3d back = sys[t] * f;
        const double res = std::hypot(back(0) - b(0), back(1) - b(1));
        double viol = 0.0;
        bool ok = true;
        for (int k = 0; k < 3; ++k) {
          if (f(k) < -cfg.fraction_tol || f(k) > 1.0 + cfg.fraction_tol) ok = false;
          viol += std::max(0.0, -f(k)) + std::max(0.0, f(k) - 1.0);
        }
        if (ok && (best < 0 || res < best_res - cfg.tie_tol)) {
          best = static_cast<int>(t);
          best_res = res;
          best_f = f;
        }
        if (least < 0 || viol < least_viol) {
          least = static_cast<int>(t);
          least_viol = viol;
          least_f = f;
        }
      }
      Eigen::Vector3d f;
      int t;
      if (best >= 0) {
        f = project_to_simplex_clamped(best_f);
        t = best;
        resid[p] = best_res;
      } else {
        f = project_to_simplex_clamped(least_f);
        t = least;
        infeasible[p] = 1;
      }
      r.chosen_triplet[p] = t;
      for (int k = 0; k < 3; ++k) r.maps.maps[lib.triplets()[t][k]].data[p] += f(k);
    }
  });
  for (std::size_t p = 0; p < low.size(); ++p) {
    r.infeasible_pixels += infeasible[p];
    r.max_residual = std::max(r.max_residual, resid[p]);
  }
  return r;
}

/// Noiseless monochromatic attenuation images sum_m f_m mu_m per channel.
inline std::pair<Image2, Image2> attenuation_from_fractions(const MaterialMaps& maps, const TripletLibrary& lib) {
  if (maps.maps.empty()) throw InvalidArgument("no material maps");
  Image2 lo = Image2::zeros(maps.maps[0].height, maps.maps[0].width, maps.maps[0].spacing);
  Image2 hi = lo;
  for (std::size_t m = 0; m < maps.count(); ++m) {
    const auto id = lib.find(maps.names[m]);
    if (!id) throw InvalidArgument("material '" + maps.names[m] + "' is not in the library");
    const auto& mu = lib.materials()[*id];
    for (std::size_t p = 0; p < lo.size(); ++p) {
      lo.data[p] += maps.maps[m].data[p] * mu.mu_low;
      hi.data[p] += maps.maps[m].data[p] * mu.mu_high;
    }
  }
  return {lo, hi};
}

/// Per-channel FBP of log-transmission sinograms into 1/mm images.
inline std::pair<Image2, Image2> attenuation_images_from_sinograms(const Sinogram& log_low, const Sinogram& log_high,
                                                                   const FbpConfig& cfg) {
  for (const Sinogram* s : {&log_low, &log_high})
    if (s->stage != SinoStage::log_transmission)
      throw InvalidArgument("attenuation images need log-transmission sinograms");
  return {fbp_fan_2d(log_low, cfg), fbp_fan_2d(log_high, cfg)};
}

}  // namespace tomokit
