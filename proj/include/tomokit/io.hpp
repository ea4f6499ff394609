#pragma once

// RVF1 / SGM1 containers.
//
// Each container is a JSON header file plus a sibling raw payload named
// "<header>.raw" holding little-endian scalars, row-major, last dimension
// fastest. RVF1 carries volumes (dims [D,H,W]) and images (dims [H,W]);
// SGM1 carries sinograms with their angles, stage tag and fan geometry.
// f32le is the default payload type; f64le is available for lossless storage
// of double-precision intermediates.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tomokit/core.hpp"
#include "tomokit/geometry.hpp"
#include "tomokit/volume.hpp"

namespace tomokit {

enum class DType { f32le, f64le };

inline const char* to_string(DType d) { return d == DType::f32le ? "f32le" : "f64le"; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32le") return DType::f32le;
  if (s == "f64le") return DType::f64le;
  throw FormatError("unsupported dtype '" + s + "'");
}

inline std::size_t dtype_bytes(DType d) { return d == DType::f32le ? 4 : 8; }

namespace detail {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline fs::path payload_path(const fs::path& header) {
  fs::path p = header;
  p += ".raw";
  return p;
}

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

inline void write_payload(const fs::path& path, std::span<const double> values, DType dtype) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  std::vector<char> buf(values.size() * dtype_bytes(dtype));
  char* out = buf.data();
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidArgument("refusing to write non-finite value to " + path.string());
    if (dtype == DType::f32le) {
      const float f = byteswap_if_big(static_cast<float>(v));
      std::memcpy(out, &f, 4);
      out += 4;
    } else {
      const double d = byteswap_if_big(v);
      std::memcpy(out, &d, 8);
      out += 8;
    }
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

inline std::vector<double> read_payload(const fs::path& path, std::size_t count, DType dtype) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing payload '" + path.string() + "'");
  is.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(is.tellg());
  is.seekg(0);
  const std::size_t expected = count * dtype_bytes(dtype);
  if (bytes != expected)
    throw FormatError("dimension/payload mismatch in '" + path.string() + "': header implies " +
                      std::to_string(expected) + " bytes, payload has " + std::to_string(bytes));
  std::vector<char> buf(bytes);
  is.read(buf.data(), static_cast<std::streamsize>(bytes));
  std::vector<double> out(count);
  const char* in = buf.data();
  for (std::size_t i = 0; i < count; ++i) {
    double v;
    if (dtype == DType::f32le) {
      float f;
      std::memcpy(&f, in, 4);
      in += 4;
      v = byteswap_if_big(f);
    } else {
      std::memcpy(&v, in, 8);
      in += 8;
      v = byteswap_if_big(v);
    }
    if (!std::isfinite(v))
      throw FormatError("non-finite value at element " + std::to_string(i) + " of '" + path.string() + "'");
    out[i] = v;
  }
  return out;
}

inline json read_header(const fs::path& path, const char* magic) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open '" + path.string() + "'");
  json h;
  try {
    is >> h;
  } catch (const json::exception& e) {
    throw FormatError("malformed header '" + path.string() + "': " + e.what());
  }
  if (!h.is_object() || h.value("magic", std::string{}) != magic)
    throw FormatError("magic mismatch in '" + path.string() + "', expected " + magic);
  return h;
}

inline void write_header(const fs::path& path, const json& h) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << h.dump(2) << '\n';
}

inline json geometry_to_json(const Geometry& g) {
  return json{{"d1_mm", g.d1_mm}, {"d2_mm", g.d2_mm}, {"det_nu", g.det_nu},
              {"det_nv", g.det_nv}, {"du_mm", g.du_mm}, {"dv_mm", g.dv_mm}};
}

inline Geometry geometry_from_json(const json& j) {
  Geometry g;
  try {
    g.d1_mm = j.at("d1_mm").get<double>();
    g.d2_mm = j.at("d2_mm").get<double>();
    g.det_nu = j.at("det_nu").get<int>();
    g.det_nv = j.at("det_nv").get<int>();
    g.du_mm = j.at("du_mm").get<double>();
    g.dv_mm = j.at("dv_mm").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad geometry block: ") + e.what());
  }
  g.validate();
  return g;
}

template <class T>
std::vector<T> get_array(const json& h, const char* key) {
  try {
    return h.at(key).get<std::vector<T>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad or missing '") + key + "': " + e.what());
  }
}

}  // namespace detail

using detail::geometry_from_json;
using detail::geometry_to_json;

// ---------------------------------------------------------------------------
// RVF1

/// Generic RVF1 record: any rank, plus free-form extra header fields.
struct RvfRecord {
  std::vector<int> dims;
  std::vector<double> spacing_mm;
  std::string tag;
  std::vector<double> data;
  nlohmann::json extra = nlohmann::json::object();
};

inline void save_rvf(const std::filesystem::path& path, const RvfRecord& r, DType dtype = DType::f32le) {
  std::size_t n = 1;
  for (int d : r.dims) {
    if (d < 1) throw InvalidArgument("RVF1 dims must be positive");
    n *= static_cast<std::size_t>(d);
  }
  if (n != r.data.size()) throw InvalidArgument("RVF1 dims do not match data length");
  nlohmann::json h = r.extra;
  h["magic"] = "RVF1";
  h["dtype"] = to_string(dtype);
  h["dims"] = r.dims;
  h["spacing_mm"] = r.spacing_mm;
  h["tag"] = r.tag;
  h["payload"] = detail::payload_path(path).filename().string();
  detail::write_payload(detail::payload_path(path), r.data, dtype);
  detail::write_header(path, h);
}

inline RvfRecord load_rvf(const std::filesystem::path& path) {
  const auto h = detail::read_header(path, "RVF1");
  RvfRecord r;
  r.dims = detail::get_array<int>(h, "dims");
  if (r.dims.empty()) throw FormatError("RVF1 header has empty dims");
  std::size_t n = 1;
  for (int d : r.dims) {
    if (d < 1) throw FormatError("RVF1 dims must be positive");
    n *= static_cast<std::size_t>(d);
  }
  if (h.contains("spacing_mm")) r.spacing_mm = detail::get_array<double>(h, "spacing_mm");
  r.tag = h.value("tag", std::string{});
  const DType dtype = parse_dtype(h.value("dtype", std::string{}));
  const auto payload = path.parent_path() / h.value("payload", detail::payload_path(path).filename().string());
  r.data = detail::read_payload(payload, n, dtype);
  r.extra = h;
  return r;
}

inline void save_volume(const std::filesystem::path& path, const Volume& v, DType dtype = DType::f32le,
                        const std::string& tag = "density") {
  RvfRecord r;
  r.dims = {v.dims[0], v.dims[1], v.dims[2]};
  r.spacing_mm = {v.spacing[0], v.spacing[1], v.spacing[2]};
  r.tag = tag;
  r.data = v.data;
  save_rvf(path, r, dtype);
}

inline Volume load_volume(const std::filesystem::path& path) {
  auto r = load_rvf(path);
  if (r.dims.size() != 3) throw FormatError("'" + path.string() + "' is not a 3D RVF1 volume");
  Volume v;
  v.dims = {r.dims[0], r.dims[1], r.dims[2]};
  if (r.spacing_mm.size() == 3) v.spacing = {r.spacing_mm[0], r.spacing_mm[1], r.spacing_mm[2]};
  v.data = std::move(r.data);
  return v;
}

inline void save_image(const std::filesystem::path& path, const Image2& img, DType dtype = DType::f32le,
                       const std::string& tag = "image") {
  RvfRecord r;
  r.dims = {img.height, img.width};
  r.spacing_mm = {img.spacing[0], img.spacing[1]};
  r.tag = tag;
  r.data = img.data;
  save_rvf(path, r, dtype);
}

/// Loads a 2D RVF1 image. A 3D record with depth 1 is accepted as well.
inline Image2 load_image(const std::filesystem::path& path, std::string* tag = nullptr) {
  auto r = load_rvf(path);
  if (r.dims.size() == 3 && r.dims[0] == 1) {
    r.dims.erase(r.dims.begin());
    if (r.spacing_mm.size() == 3) r.spacing_mm.erase(r.spacing_mm.begin());
  }
  if (r.dims.size() != 2) throw FormatError("'" + path.string() + "' is not a 2D RVF1 image");
  Image2 img;
  img.height = r.dims[0];
  img.width = r.dims[1];
  if (r.spacing_mm.size() == 2) img.spacing = {r.spacing_mm[0], r.spacing_mm[1]};
  img.data = std::move(r.data);
  if (tag) *tag = r.tag;
  return img;
}

// ---------------------------------------------------------------------------
// SGM1

inline void save_sinogram(const std::filesystem::path& path, const Sinogram& s, DType dtype = DType::f32le) {
  s.validate();
  nlohmann::json h;
  h["magic"] = "SGM1";
  h["dtype"] = to_string(dtype);
  h["n_views"] = s.n_views;
  h["n_det"] = s.n_det;
  std::vector<double> deg(s.angles.size());
  for (std::size_t i = 0; i < deg.size(); ++i) deg[i] = s.angles[i] * 180.0 / kPi;
  h["angles_deg"] = deg;
  h["angles_rad"] = s.angles;  // exact copy; angles_deg is for readers
  h["stage"] = to_string(s.stage);
  h["geometry"] = geometry_to_json(s.geometry);
  h["payload"] = detail::payload_path(path).filename().string();
  detail::write_payload(detail::payload_path(path), s.data, dtype);
  detail::write_header(path, h);
}

inline Sinogram load_sinogram(const std::filesystem::path& path) {
  const auto h = detail::read_header(path, "SGM1");
  Sinogram s;
  try {
    s.n_views = h.at("n_views").get<int>();
    s.n_det = h.at("n_det").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad SGM1 header: ") + e.what());
  }
  if (s.n_views < 1 || s.n_det < 1) throw FormatError("SGM1 dims must be positive");
  if (h.contains("angles_rad")) {
    s.angles = detail::get_array<double>(h, "angles_rad");
  } else {
    const auto deg = detail::get_array<double>(h, "angles_deg");
    s.angles.resize(deg.size());
    for (std::size_t i = 0; i < deg.size(); ++i) s.angles[i] = deg[i] * kPi / 180.0;
  }
  if (static_cast<int>(s.angles.size()) != s.n_views) throw FormatError("SGM1 angle count != n_views");
  s.stage = parse_stage(h.value("stage", std::string{}));
  if (!h.contains("geometry")) throw FormatError("SGM1 header lacks a geometry block");
  s.geometry = geometry_from_json(h.at("geometry"));
  const DType dtype = parse_dtype(h.value("dtype", std::string{}));
  const auto payload = path.parent_path() / h.value("payload", detail::payload_path(path).filename().string());
  s.data = detail::read_payload(payload, static_cast<std::size_t>(s.n_views) * s.n_det, dtype);
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("invalid sinogram in '") + path.string() + "': " + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Material maps: one RVF1 per material, "<prefix><name>.rvf".

inline std::vector<std::filesystem::path> save_material_maps(const std::string& prefix, const MaterialMaps& m,
                                                             DType dtype = DType::f32le) {
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < m.count(); ++i) {
    paths.emplace_back(prefix + m.names[i] + ".rvf");
    save_image(paths.back(), m.maps[i], dtype, "fraction:" + m.names[i]);
  }
  return paths;
}

/// Loads maps and re-checks the fraction bounds.
inline MaterialMaps load_material_maps(const std::string& prefix, const std::vector<std::string>& names) {
  MaterialMaps m;
  for (const auto& n : names) {
    m.names.push_back(n);
    m.maps.push_back(load_image(prefix + n + ".rvf"));
    if (!m.maps.back().same_shape(m.maps.front())) throw FormatError("material maps differ in shape");
  }
  if (m.maps.empty()) return m;
  for (std::size_t p = 0; p < m.maps.front().size(); ++p) {
    double sum = 0.0;
    for (std::size_t i = 0; i < m.count(); ++i) {
      const double f = m.maps[i].data[p];
      if (f < -1e-6 || f > 1.0 + 1e-6) throw FormatError("fraction outside [0,1] in " + m.names[i]);
      if (m.names[i] != "air") sum += f;
    }
    if (sum > 1.0 + 1e-5) throw FormatError("non-air fractions sum above 1");
  }
  return m;
}

// ---------------------------------------------------------------------------
// 16-bit PGM export (lossy: min-max windowed to 0..65535).

inline void export_pgm16(const std::filesystem::path& path, const Image2& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << "P5\n" << img.width << ' ' << img.height << "\n65535\n";
  const auto [mn, mx] = std::minmax_element(img.data.begin(), img.data.end());
  const double lo = *mn, span = *mx > *mn ? *mx - *mn : 1.0;
  std::vector<unsigned char> buf(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp((img.data[i] - lo) / span, 0.0, 1.0) * 65535.0));
    buf[2 * i] = static_cast<unsigned char>(q >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

/// Middle axial slice of a volume.
inline Image2 middle_slice(const Volume& v) {
  Image2 img = Image2::zeros(v.height(), v.width(), {v.spacing[1], v.spacing[2]});
  const int k = v.depth() / 2;
  std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(v.index(k, 0, 0)), img.size(), img.data.begin());
  return img;
}

}  // namespace tomokit
