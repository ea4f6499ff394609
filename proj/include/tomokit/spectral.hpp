#pragma once

// Polychromatic dual-energy model: per-channel spectral sensitivities and
// per-material linear attenuation on a shared uniform energy grid.
//
// Text format (one record per line, '#' starts a comment):
//
//   energies_keV  e0 e1 ... eN
//   sensitivity   low  s0 ... sN
//   sensitivity   high s0 ... sN
//   mu_per_mm     <material> m0 ... mN
//
// Sensitivities are normalized on load so that sum_E S(E) dE = 1 per channel.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tomokit/core.hpp"

namespace tomokit {

enum class Channel { low = 0, high = 1 };

inline const char* to_string(Channel c) { return c == Channel::low ? "low" : "high"; }

inline Channel parse_channel(const std::string& s) {
  if (s == "low") return Channel::low;
  if (s == "high") return Channel::high;
  throw InvalidArgument("unknown channel '" + s + "'");
}

class SpectralModel {
 public:
  SpectralModel() = default;

  /// Validates and normalizes. A single energy bin gets dE = 1.
  SpectralModel(std::vector<double> energies_kev, std::array<std::vector<double>, 2> sensitivity,
                std::vector<std::string> materials, std::vector<std::vector<double>> mu_per_mm)
      : energies_(std::move(energies_kev)),
        sens_(std::move(sensitivity)),
        materials_(std::move(materials)),
        mu_(std::move(mu_per_mm)) {
    const std::size_t n = energies_.size();
    if (n == 0) throw InvalidArgument("spectral model needs at least one energy bin");
    delta_ = 1.0;
    if (n > 1) {
      delta_ = (energies_.back() - energies_.front()) / static_cast<double>(n - 1);
      if (!(delta_ > 0.0)) throw InvalidArgument("energy grid must be increasing");
      for (std::size_t i = 1; i < n; ++i)
        if (std::abs((energies_[i] - energies_[i - 1]) - delta_) > 1e-6 * delta_)
          throw InvalidArgument("energy grid must be uniformly spaced");
    }
    for (auto& s : sens_) {
      if (s.size() != n) throw InvalidArgument("sensitivity length differs from energy grid");
      double total = 0.0;
      for (double v : s) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("sensitivity must be finite and >= 0");
        total += v * delta_;
      }
      if (!(total > 0.0)) throw InvalidArgument("sensitivity has zero total weight");
      for (double& v : s) v /= total;
    }
    if (materials_.size() != mu_.size()) throw InvalidArgument("material name / mu count mismatch");
    for (std::size_t m = 0; m < mu_.size(); ++m) {
      if (mu_[m].size() != n) throw InvalidArgument("mu length differs from energy grid for " + materials_[m]);
      for (double v : mu_[m])
        if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("mu must be finite and > 0 for " + materials_[m]);
    }
  }

  std::size_t bins() const { return energies_.size(); }
  double delta_kev() const { return delta_; }
  const std::vector<double>& energies_kev() const { return energies_; }
  const std::vector<double>& sensitivity(Channel c) const { return sens_[static_cast<int>(c)]; }
  const std::vector<std::string>& materials() const { return materials_; }

  std::size_t material_index(const std::string& name) const {
    for (std::size_t i = 0; i < materials_.size(); ++i)
      if (materials_[i] == name) return i;
    throw InvalidArgument("spectral model has no material '" + name + "'");
  }

  const std::vector<double>& mu(const std::string& material) const { return mu_[material_index(material)]; }
  const std::vector<double>& mu(std::size_t m) const { return mu_[m]; }

  /// Quadrature weights S(E) dE for a channel.
  std::vector<double> weights(Channel c) const {
    std::vector<double> w = sensitivity(c);
    for (double& v : w) v *= delta_;
    return w;
  }

 private:
  std::vector<double> energies_;
  double delta_ = 1.0;
  std::array<std::vector<double>, 2> sens_;
  std::vector<std::string> materials_;
  std::vector<std::vector<double>> mu_;
};

inline SpectralModel parse_spectral_model(std::istream& is, const std::string& origin = "<stream>") {
  std::vector<double> energies;
  std::array<std::vector<double>, 2> sens;
  bool have[2] = {false, false};
  std::vector<std::string> names;
  std::vector<std::vector<double>> mu;
  std::string line;
  int lineno = 0;
  auto numbers = [&](std::istringstream& ss) {
    std::vector<double> out;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        out.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": not a number '" + tok + "'");
      }
    }
    return out;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    if (key == "energies_keV") {
      energies = numbers(ss);
    } else if (key == "sensitivity") {
      std::string ch;
      ss >> ch;
      const int c = static_cast<int>(parse_channel(ch));
      sens[c] = numbers(ss);
      have[c] = true;
    } else if (key == "mu_per_mm") {
      std::string name;
      if (!(ss >> name)) throw FormatError(origin + ":" + std::to_string(lineno) + ": mu_per_mm needs a material");
      names.push_back(name);
      mu.push_back(numbers(ss));
    } else {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (!have[0] || !have[1]) throw FormatError(origin + ": both low and high sensitivities are required");
  try {
    return SpectralModel(std::move(energies), std::move(sens), std::move(names), std::move(mu));
  } catch (const InvalidArgument& e) {
    throw FormatError(origin + ": " + e.what());
  }
}

inline SpectralModel load_spectral_model(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open spectral model '" + path.string() + "'");
  return parse_spectral_model(is, path.string());
}

inline std::string format_spectral_model(const SpectralModel& m) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "energies_keV";
  for (double e : m.energies_kev()) os << ' ' << e;
  os << '\n';
  for (Channel c : {Channel::low, Channel::high}) {
    os << "sensitivity " << to_string(c);
    for (double s : m.sensitivity(c)) os << ' ' << s;
    os << '\n';
  }
  for (std::size_t i = 0; i < m.materials().size(); ++i) {
    os << "mu_per_mm " << m.materials()[i];
    for (double v : m.mu(i)) os << ' ' << v;
    os << '\n';
  }
  return os.str();
}

/// Transmission of one detector bin given per-material path integrals (mm),
/// ordered like `material_ids`. Normalized so that zero paths give exactly 1.
inline double polychromatic_transmission(const SpectralModel& model, const std::vector<double>& weights,
                                         std::span<const std::size_t> material_ids,
                                         std::span<const double> paths) {
  double num = 0.0, den = 0.0;
  for (std::size_t e = 0; e < model.bins(); ++e) {
    if (weights[e] == 0.0) continue;
    double att = 0.0;
    for (std::size_t k = 0; k < material_ids.size(); ++k) att += model.mu(material_ids[k])[e] * paths[k];
    num += weights[e] * std::exp(-att);
    den += weights[e];
  }
  return num / den;
}

}  // namespace tomokit
