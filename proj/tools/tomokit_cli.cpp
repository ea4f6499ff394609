// tomokit command-line front end.
//
// Every run writes a manifest next to its outputs: argv, working directory,
// the fully resolved option set, and SHA-256 digests of all input and output
// files. `tomokit replay MANIFEST` re-executes the recorded argv and checks
// that the outputs hash identically.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tomokit/tomokit.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tomokit;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read '" + p.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

// Files read and written by the current run, in order.
struct Ledger {
  std::vector<fs::path> inputs, outputs;

  // A header file and its raw payload, when the payload exists.
  void add(std::vector<fs::path>& list, const fs::path& p) {
    list.push_back(p);
    const auto payload = detail::payload_path(p);
    if (p.extension() == ".rvf" || p.extension() == ".sgm")
      if (fs::exists(payload)) list.push_back(payload);
  }
  void input(const fs::path& p) { add(inputs, p); }
  void output(const fs::path& p) { add(outputs, p); }
  void output_plain(const fs::path& p) { outputs.push_back(p); }
};

struct Globals {
  std::uint64_t seed = 0;
  int threads = 0;
  bool export_pgm = false;
  std::string manifest;
};

fs::path require_file(const std::string& p) {
  if (!fs::is_regular_file(p)) throw UsageError("input file not found: " + p);
  return p;
}

std::pair<double, double> parse_pair(const std::string& s, const std::string& what) {
  const auto comma = s.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument("missing comma");
    std::size_t n1 = 0, n2 = 0;
    const std::string a = s.substr(0, comma), b = s.substr(comma + 1);
    const double x = std::stod(a, &n1), y = std::stod(b, &n2);
    if (n1 != a.size() || n2 != b.size()) throw std::invalid_argument("trailing characters");
    return {x, y};
  } catch (const std::exception&) {
    throw UsageError("bad " + what + " '" + s + "' (expected A,B in degrees)");
  }
}

Pose parse_pose(const std::string& s) {
  const auto [t, p] = parse_pair(s, "pose");
  return Pose::from_degrees(t, p);
}

json pose_json(const Pose& p) { return json::array({p.theta_deg(), p.phi_deg()}); }

struct GeometryOpts {
  std::optional<double> d1, d2, du, dv;
  std::optional<int> nu, nv;

  void add(CLI::App* app) {
    app->add_option("--d1", d1, "source to isocenter distance (mm)");
    app->add_option("--d2", d2, "source to detector distance (mm)");
    app->add_option("--nu", nu, "detector columns");
    app->add_option("--nv", nv, "detector rows (1 for fan beam)");
    app->add_option("--du", du, "detector column pitch (mm)");
    app->add_option("--dv", dv, "detector row pitch (mm)");
  }
  Geometry apply(Geometry g) const {
    if (d1) g.d1_mm = *d1;
    if (d2) g.d2_mm = *d2;
    if (nu) g.det_nu = *nu;
    if (nv) g.det_nv = *nv;
    if (du) g.du_mm = *du;
    if (dv) g.dv_mm = *dv;
    g.validate();
    return g;
  }
};

class Runner {
 public:
  Globals& g;
  Ledger ledger;
  Runner(Globals& globals) : g(globals) {}

  void pgm(const fs::path& p, const Image2& img) {
    if (!g.export_pgm) return;
    fs::path q = p;
    q.replace_extension(".pgm");
    export_pgm16(q, img);
    ledger.output_plain(q);
  }
  void image(const fs::path& p, const Image2& img, DType dt = DType::f32le, const std::string& tag = "image") {
    save_image(p, img, dt, tag);
    ledger.output(p);
    pgm(p, img);
  }
  void volume(const fs::path& p, const Volume& v, const std::string& tag = "density") {
    save_volume(p, v, DType::f32le, tag);
    ledger.output(p);
    pgm(p, middle_slice(v));
  }
  void sinogram(const fs::path& p, const Sinogram& s, DType dt = DType::f32le) {
    save_sinogram(p, s, dt);
    ledger.output(p);
    if (g.export_pgm) {
      Image2 img = Image2::zeros(s.n_views, s.n_det);
      img.data = s.data;
      pgm(p, img);
    }
  }
  void text(const fs::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw Error("cannot open '" + p.string() + "' for writing");
    os << s;
    ledger.output_plain(p);
  }
  Image2 load_img(const std::string& p) {
    Image2 img = load_image(require_file(p));
    ledger.input(p);
    return img;
  }
  Volume load_vol(const std::string& p) {
    Volume v = load_volume(require_file(p));
    ledger.input(p);
    return v;
  }
  Sinogram load_sino(const std::string& p) {
    Sinogram s = load_sinogram(require_file(p));
    ledger.input(p);
    return s;
  }
  fs::path config_file(const std::string& p) {
    require_file(p);
    ledger.input(p);
    return p;
  }
};

std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands.

struct PhantomOpts {
  std::string kind, out;
  int size = 64;
  double spacing = 1.0;
  int supersample = 2;
};

void run_phantom(Runner& r, const PhantomOpts& o) {
  if (o.size < 4) throw InvalidArgument("phantom size must be >= 4");
  if (o.kind == "two-sphere") {
    r.volume(o.out, make_two_sphere_phantom(o.size, o.spacing, o.supersample));
  } else if (o.kind == "cube") {
    r.volume(o.out, make_cube_phantom(o.size, o.spacing));
  } else if (o.kind == "shepp-logan") {
    r.volume(o.out, make_shepp_logan_3d(o.size, o.spacing, o.supersample));
  } else if (o.kind == "disk") {
    r.image(o.out, make_disk_phantom_2d(o.size, o.spacing, 0.5, o.supersample));
  } else if (o.kind == "breast") {
    const MaterialMaps m = make_breast_phantom_2d(r.g.seed, o.size, o.size, o.spacing);
    for (std::size_t k = 0; k < m.count(); ++k)
      r.image(o.out + m.names[k] + ".rvf", m.maps[k], DType::f32le, "fraction:" + m.names[k]);
  } else {
    throw UsageError("unknown phantom kind '" + o.kind + "'");
  }
}

std::vector<Pose> poses_from(const std::vector<std::string>& specs, int preset) {
  if (!specs.empty() && preset != 0) throw UsageError("give either --pose or --views-preset, not both");
  if (preset != 0) return view_preset(preset);
  std::vector<Pose> poses;
  for (const auto& s : specs) poses.push_back(parse_pose(s));
  if (poses.empty()) poses.push_back(Pose{});
  return poses;
}

struct ProjectOpts {
  std::string volume, out;
  std::vector<std::string> poses;
  int preset = 0;
  int samples = 256;
  bool midpoint = false;
  bool transmission = false;
  GeometryOpts geo;
};

json box_json(const Box& b) {
  return {{"box_lo", {b.lo.x(), b.lo.y(), b.lo.z()}}, {"box_hi", {b.hi.x(), b.hi.y(), b.hi.z()}}};
}

void run_project(Runner& r, const ProjectOpts& o) {
  const Volume v = r.load_vol(o.volume);
  const Geometry g = o.geo.apply(Geometry{});
  const auto poses = poses_from(o.poses, o.preset);
  const SamplerConfig sc{o.samples, !o.midpoint, r.g.seed};
  sc.validate();
  fs::create_directories(o.out);
  std::ostringstream list;
  for (std::size_t k = 0; k < poses.size(); ++k) {
    const Image2 img = project(v, g, poses[k], sc, o.transmission);
    RvfRecord rec;
    rec.dims = {img.height, img.width};
    rec.spacing_mm = {img.spacing[0], img.spacing[1]};
    rec.tag = "projection";
    rec.data = img.data;
    rec.extra = box_json(v.bounds());
    rec.extra["geometry"] = geometry_to_json(g);
    rec.extra["pose_deg"] = pose_json(poses[k]);
    rec.extra["stage"] = o.transmission ? "transmission" : "line_integral";
    const std::string name = "view_" + std::to_string(k) + ".rvf";
    const fs::path p = fs::path(o.out) / name;
    save_rvf(p, rec);
    r.ledger.output(p);
    r.pgm(p, img);
    list << name << ':' << csv_num(poses[k].theta_deg()) << ',' << csv_num(poses[k].phi_deg()) << '\n';
  }
  r.text(fs::path(o.out) / "views.txt", list.str());
}

struct SinoOpts {
  std::string image, maps, spectral, channel = "low", out;
  int views = 360;
  double d1 = 500.0, d2 = 800.0, du = 1.0;
  int ndet = 512;
  double spp = 2.0;
  bool log = false;
};

void run_sino(Runner& r, const SinoOpts& o) {
  Geometry g;
  g.d1_mm = o.d1;
  g.d2_mm = o.d2;
  g.det_nu = o.ndet;
  g.det_nv = 1;
  g.du_mm = g.dv_mm = o.du;
  g.validate();
  if (o.image.empty() == o.maps.empty()) throw UsageError("give exactly one of --image or --maps");
  if (!o.image.empty()) {
    if (o.log) throw UsageError("--log applies to spectral sinograms (--maps) only");
    r.sinogram(o.out, sinogram_fan_2d(r.load_img(o.image), g, o.views, o.spp));
    return;
  }
  if (o.spectral.empty()) throw UsageError("--maps requires --spectral");
  const SpectralModel model = load_spectral_model(r.config_file(o.spectral));
  MaterialMaps maps;
  for (const auto& name : model.materials()) {
    const std::string p = o.maps + name + ".rvf";
    if (!fs::exists(p)) continue;
    maps.names.push_back(name);
    maps.maps.push_back(r.load_img(p));
  }
  if (maps.count() == 0) throw UsageError("no material maps found with prefix '" + o.maps + "'");
  const auto ms = sinogram_fan_2d(maps, g, o.views, {"air"}, o.spp);
  Sinogram t = spectral_transmission(ms, model, parse_channel(o.channel));
  r.sinogram(o.out, o.log ? log_transform(t) : t, DType::f64le);
}

struct DectOpts {
  DectRunConfig cfg;
  std::string filter = "ram-lak", interp = "linear";
};

void run_dect_cli(Runner& r, DectOpts o) {
  o.cfg.seed = r.g.seed;
  o.cfg.filter = parse_ramp_filter(o.filter);
  o.cfg.interpolation = parse_interp(o.interp);
  // Missing model files are configuration errors.
  for (const auto& p : {o.cfg.spectral_path, o.cfg.triplet_path}) r.config_file(p);
  const DectReport rep = run_dect(o.cfg);
  for (const auto& f : rep.files) r.ledger.output_plain(f);
  std::cout << "material,rmse,mae,neg_psnr,ssim\n";
  for (const auto& s : rep.materials)
    std::cout << s.name << ',' << csv_num(s.rmse) << ',' << csv_num(s.mae) << ',' << csv_num(s.neg_psnr) << ','
              << csv_num(s.ssim) << '\n';
  std::cout << "infeasible_pixels," << rep.infeasible_pixels << '\n';
}

struct FbpOpts {
  std::string sino, out, filter = "ram-lak", interp = "linear";
  int height = 256, width = 256;
  double pixel = 1.0;
};

void run_fbp(Runner& r, const FbpOpts& o) {
  const Sinogram s = r.load_sino(o.sino);
  FbpConfig c;
  c.filter = parse_ramp_filter(o.filter);
  c.interpolation = parse_interp(o.interp);
  c.height = o.height;
  c.width = o.width;
  c.pixel_mm = o.pixel;
  r.image(o.out, fbp_fan_2d(s, c));
}

struct TvOpts {
  std::string sino, out, init, log;
  TvConfig cfg;
};

void run_tv(Runner& r, const TvOpts& o) {
  const Sinogram s = r.load_sino(o.sino);
  std::optional<Image2> init;
  if (!o.init.empty()) init = r.load_img(o.init);
  const SartTvResult res = sart_tv(s, o.cfg, init);
  r.image(o.out, res.image);
  std::ostringstream csv;
  csv << "iter,residual,tv_value\n";
  for (const auto& it : res.log) csv << it.iter << ',' << csv_num(it.residual) << ',' << csv_num(it.tv) << '\n';
  r.text(o.log.empty() ? o.out + ".log.csv" : o.log, csv.str());
}

struct FitOpts {
  std::vector<std::string> views;
  int preset = 0;
  std::string volume, out, log;
  std::optional<double> box_mm;
  FitConfig cfg;
  int samples = 64;
  double lr = 5e-4;
  std::vector<int> shape_widths{128, 128, 128, 128}, density_widths{64, 64};
  int m_sh = 32, m_a = 32, n_freq_pos = 10, n_freq_dir = 4;
  std::string activation = "relu";
  GeometryOpts geo;
};

void run_fit(Runner& r, FitOpts o) {
  std::vector<FieldView> views;
  std::optional<Geometry> header_geo;
  std::optional<Box> box;
  if (o.preset != 0) {
    if (!o.views.empty()) throw UsageError("give either --views or --views-preset, not both");
    if (o.volume.empty()) throw UsageError("--views-preset needs --volume to simulate the views");
    const Volume v = r.load_vol(o.volume);
    header_geo = o.geo.apply(Geometry{});
    box = v.bounds();
    for (const Pose& p : view_preset(o.preset))
      views.push_back({p, project(v, *header_geo, p, SamplerConfig{256, true, r.g.seed})});
  } else {
    if (o.views.empty()) throw UsageError("fit-field needs --views or --views-preset");
    for (const auto& spec : o.views) {
      // FILE[:THETA,PHI]; the pose falls back to the header's pose_deg.
      const auto colon = spec.rfind(':');
      const bool has_pose = colon != std::string::npos && spec.find(',', colon) != std::string::npos;
      const std::string path = has_pose ? spec.substr(0, colon) : spec;
      const RvfRecord rec = load_rvf(require_file(path));
      r.ledger.input(path);
      if (rec.dims.size() != 2) throw InvalidArgument("view '" + path + "' is not a 2D image");
      Pose pose;
      if (has_pose) {
        pose = parse_pose(spec.substr(colon + 1));
      } else if (rec.extra.contains("pose_deg")) {
        pose = Pose::from_degrees(rec.extra["pose_deg"][0].get<double>(), rec.extra["pose_deg"][1].get<double>());
      } else {
        throw UsageError("view '" + path + "' has no pose; use FILE:THETA,PHI");
      }
      if (!header_geo && rec.extra.contains("geometry")) header_geo = geometry_from_json(rec.extra["geometry"]);
      if (!box && rec.extra.contains("box_lo")) {
        const auto lo = rec.extra["box_lo"].get<std::vector<double>>();
        const auto hi = rec.extra["box_hi"].get<std::vector<double>>();
        box = Box{Vec3(lo[0], lo[1], lo[2]), Vec3(hi[0], hi[1], hi[2])};
      }
      Image2 img = Image2::zeros(rec.dims[0], rec.dims[1]);
      img.data = rec.data;
      views.push_back({pose, std::move(img)});
    }
  }
  const Geometry g = o.geo.apply(header_geo.value_or(Geometry{}));
  if (o.box_mm) box = Box::centered(Vec3::Constant(*o.box_mm));
  if (!box) throw UsageError("view headers carry no volume box; give --box-mm");

  FieldArch arch;
  arch.pos.n_freq = o.n_freq_pos;
  arch.dir.n_freq = o.n_freq_dir;
  arch.m_sh = o.m_sh;
  arch.m_a = o.m_a;
  arch.shape_widths = o.shape_widths;
  arch.density_widths = o.density_widths;
  arch.hidden = parse_activation(o.activation);
  auto net = FieldNetworkF::create(arch, hash_combine(r.g.seed, 1), true, *box);
  auto codes = LatentCodes::sample(hash_combine(r.g.seed, 2), arch.m_sh, arch.m_a);
  FitConfig cfg = o.cfg;
  cfg.optimizer.lr = o.lr;
  cfg.sampler = SamplerConfig{o.samples, true, hash_combine(r.g.seed, 3)};
  cfg.seed = r.g.seed;
  const FitResult res = fit(net, codes, views, g, cfg);

  save_field(o.out, net, codes);
  r.ledger.output(o.out);
  std::ostringstream csv;
  csv << "iter,loss,psnr,lr\n";
  for (const auto& e : res.log)
    csv << e.iter << ',' << csv_num(e.loss) << ',' << csv_num(e.psnr) << ',' << csv_num(e.lr) << '\n';
  r.text(o.log.empty() ? o.out + ".log.csv" : o.log, csv.str());
  std::ostringstream ev;
  ev << "iter,mean_view_psnr\n";
  for (const auto& e : res.evals) ev << e.iter << ',' << csv_num(e.mean_psnr) << '\n';
  r.text(o.out + ".eval.csv", ev.str());
  std::cout << "iterations," << res.iterations << "\nreached_stop_psnr," << (res.reached ? 1 : 0) << '\n';
  if (!res.evals.empty()) std::cout << "final_mean_view_psnr," << csv_num(res.evals.back().mean_psnr) << '\n';
}

std::pair<FieldNetworkF, LatentCodes> load_checkpoint(Runner& r, const std::string& p) {
  auto f = load_field<float>(require_file(p));
  r.ledger.input(p);
  return f;
}

struct RenderOpts {
  std::string field, pose = "0,0", out;
  int samples = 256;
  GeometryOpts geo;
};

void run_render(Runner& r, const RenderOpts& o) {
  const auto [net, codes] = load_checkpoint(r, o.field);
  const Geometry g = o.geo.apply(Geometry{});
  r.image(o.out, render_projection(net, g, parse_pose(o.pose), codes, SamplerConfig{o.samples, true, r.g.seed}));
}

struct ExtractOpts {
  std::string field, dir_pose = "0,0", out;
  std::vector<int> dims{128, 128, 128};
};

void run_extract(Runner& r, const ExtractOpts& o) {
  const auto [net, codes] = load_checkpoint(r, o.field);
  if (o.dims.size() != 3) throw UsageError("--dims takes D,H,W");
  r.volume(o.out, extract_volume(net, codes, {o.dims[0], o.dims[1], o.dims[2]}, parse_pose(o.dir_pose)));
}

struct DecomposeOpts {
  std::string low, high, triplets, spectral, truth, out;
  MmdConfig cfg;
};

void run_decompose(Runner& r, const DecomposeOpts& o) {
  const Image2 lo = r.load_img(o.low), hi = r.load_img(o.high);
  std::optional<SpectralModel> model;
  if (!o.spectral.empty()) model = load_spectral_model(r.config_file(o.spectral));
  const TripletLibrary lib = load_triplet_library(r.config_file(o.triplets), model ? &*model : nullptr);
  const MmdResult res = aa_mmd(lo, hi, lib, o.cfg);
  json summary;
  summary["infeasible_pixels"] = res.infeasible_pixels;
  summary["max_residual"] = res.max_residual;
  json mats = json::array();
  for (std::size_t k = 0; k < res.maps.count(); ++k) {
    const auto& name = res.maps.names[k];
    r.image(o.out + name + ".rvf", res.maps.maps[k], DType::f64le, "fraction:" + name);
    json m{{"material", name}};
    const std::string tp = o.truth + name + ".rvf";
    if (!o.truth.empty() && fs::exists(tp)) {
      const Image2 t = r.load_img(tp);
      m["rmse"] = rmse(res.maps.maps[k], t);
      m["mae"] = mae(res.maps.maps[k], t);
    }
    mats.push_back(m);
  }
  summary["materials"] = mats;
  r.text(o.out + "summary.json", summary.dump(2) + "\n");
}

struct EvalOpts {
  std::string a, b, out;
  double max_val = 1.0;
  LossConfig loss;
};

void run_eval(Runner& r, const EvalOpts& o) {
  const RvfRecord ra = load_rvf(require_file(o.a)), rb = load_rvf(require_file(o.b));
  r.ledger.input(o.a);
  r.ledger.input(o.b);
  if (ra.dims != rb.dims) throw InvalidArgument("eval inputs differ in shape");
  SsimConfig sc;
  sc.dynamic_range = o.max_val;
  LossConfig lc = o.loss;
  lc.max_val = o.max_val;
  // 2D images directly; volumes slice by slice along the first axis.
  if (ra.dims.size() < 2 || ra.dims.size() > 3) throw InvalidArgument("eval takes 2D images or 3D volumes");
  const int slices = ra.dims.size() == 3 ? ra.dims[0] : 1;
  const int h = ra.dims[ra.dims.size() - 2], w = ra.dims.back();
  double s = 0.0, ms = 0.0, combo = 0.0;
  for (int k = 0; k < slices; ++k) {
    Image2 ia = Image2::zeros(h, w), ib = Image2::zeros(h, w);
    const auto off = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * h * w);
    std::copy_n(ra.data.begin() + off, ia.size(), ia.data.begin());
    std::copy_n(rb.data.begin() + off, ib.size(), ib.data.begin());
    s += ssim(ia, ib, sc);
    ms += ms_ssim(ia, ib, sc);
    combo += combo_loss(ia, ib, lc, sc);
  }
  std::ostringstream csv;
  csv << "rmse,mae,psnr,ssim,ms_ssim,combo\n"
      << csv_num(rmse(ra.data, rb.data)) << ',' << csv_num(mae(ra.data, rb.data)) << ','
      << csv_num(psnr(ra.data, rb.data, o.max_val)) << ',' << csv_num(s / slices) << ',' << csv_num(ms / slices)
      << ',' << csv_num(combo / slices) << '\n';
  std::cout << csv.str();
  if (!o.out.empty()) r.text(o.out, csv.str());
}

// ---------------------------------------------------------------------------
// Manifest and replay.

json hashes(const std::vector<fs::path>& files) {
  json arr = json::array();
  for (const auto& f : files) arr.push_back({{"path", f.string()}, {"sha256", sha256_file(f)}});
  return arr;
}

fs::path default_manifest(const std::string& primary, bool is_dir, bool is_prefix) {
  if (is_dir) return fs::path(primary) / "manifest.json";
  if (is_prefix) return primary + "manifest.json";
  return primary + ".manifest.json";
}

int dispatch(const std::vector<std::string>& args);

int run_replay(const std::string& manifest_path) {
  std::ifstream is(require_file(manifest_path));
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("bad manifest '" + manifest_path + "': " + e.what());
  }
  const auto argv = m.at("argv").get<std::vector<std::string>>();
  const fs::path here = fs::current_path();
  fs::current_path(m.at("cwd").get<std::string>());
  struct Restore {
    fs::path p;
    ~Restore() { fs::current_path(p); }
  } restore{here};

  for (const auto& in : m.at("inputs")) {
    const std::string p = in.at("path");
    if (!fs::exists(p) || sha256_file(p) != in.at("sha256").get<std::string>()) {
      std::cerr << "replay: input changed or missing: " << p << '\n';
      return kExitRuntime;
    }
  }
  const int rc = dispatch(argv);
  if (rc != kExitOk) return rc;
  int mismatches = 0;
  for (const auto& out : m.at("outputs")) {
    const std::string p = out.at("path");
    if (!fs::exists(p) || sha256_file(p) != out.at("sha256").get<std::string>()) {
      std::cerr << "replay: output differs: " << p << '\n';
      ++mismatches;
    }
  }
  std::cout << "replay: " << m.at("outputs").size() - mismatches << "/" << m.at("outputs").size()
            << " outputs identical\n";
  return mismatches == 0 ? kExitOk : kExitRuntime;
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"tomokit: tomographic simulation, reconstruction and decomposition", "tomokit"};
  app.set_version_flag("--version", std::string(kVersion));
  auto* config_opt = app.set_config("--config", "", "config file: key=value lines, [subcommand] sections");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  Globals glob;
  app.add_option("--seed", glob.seed, "RNG seed")->capture_default_str();
  app.add_option("--threads", glob.threads, "worker thread cap (0: TOMOKIT_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("--export-pgm", glob.export_pgm, "also write 16-bit PGM previews (min-max windowed, lossy)");
  app.add_option("--manifest", glob.manifest, "run manifest path (default: next to the outputs)");

  PhantomOpts ph;
  auto* c_ph = app.add_subcommand("phantom", "write a synthetic phantom");
  c_ph->add_option("--kind", ph.kind, "two-sphere | cube | shepp-logan | disk | breast")
      ->required()
      ->check(CLI::IsMember({"two-sphere", "cube", "shepp-logan", "disk", "breast"}));
  c_ph->add_option("--size", ph.size, "voxels per axis")->capture_default_str();
  c_ph->add_option("--spacing", ph.spacing, "voxel size (mm)")->capture_default_str();
  c_ph->add_option("--supersample", ph.supersample, "sub-samples per axis")->capture_default_str();
  c_ph->add_option("--out", ph.out, "output RVF1 path (breast: file prefix)")->required();

  ProjectOpts pr;
  auto* c_pr = app.add_subcommand("project", "cone-beam projections of a volume");
  c_pr->add_option("--volume", pr.volume, "input RVF1 volume")->required()->check(CLI::ExistingFile);
  c_pr->add_option("--pose", pr.poses, "THETA,PHI in degrees (repeatable)");
  c_pr->add_option("--views-preset", pr.preset, "1 | 2 | 5 | 10")->check(CLI::IsMember({1, 2, 5, 10}));
  c_pr->add_option("--samples", pr.samples, "samples per ray")->capture_default_str();
  c_pr->add_flag("--midpoint", pr.midpoint, "midpoint instead of stratified sampling");
  c_pr->add_flag("--transmission", pr.transmission, "write exp(-p) instead of line integrals");
  c_pr->add_option("--out", pr.out, "output directory")->required();
  pr.geo.add(c_pr);

  SinoOpts si;
  auto* c_si = app.add_subcommand("sino", "fan-beam sinogram of a 2D image or spectral material maps");
  c_si->add_option("--image", si.image, "2D RVF1 image (line integrals)")->check(CLI::ExistingFile);
  c_si->add_option("--maps", si.maps, "material map prefix (<prefix><material>.rvf)");
  c_si->add_option("--spectral", si.spectral, "spectral model file");
  c_si->add_option("--channel", si.channel, "low | high")->check(CLI::IsMember({"low", "high"}));
  c_si->add_flag("--log", si.log, "write -log transmission");
  c_si->add_option("--views", si.views, "views over 360 degrees")->capture_default_str();
  c_si->add_option("--d1", si.d1)->capture_default_str();
  c_si->add_option("--d2", si.d2)->capture_default_str();
  c_si->add_option("--ndet", si.ndet)->capture_default_str();
  c_si->add_option("--du", si.du)->capture_default_str();
  c_si->add_option("--spp", si.spp, "samples per pixel along rays")->capture_default_str();
  c_si->add_option("--out", si.out, "output SGM1 path")->required();

  DectOpts de;
  auto* c_de = app.add_subcommand("dect-sim", "dual-energy simulation, FBP and decomposition");
  c_de->add_option("--spectral", de.cfg.spectral_path)->capture_default_str();
  c_de->add_option("--triplets", de.cfg.triplet_path)->capture_default_str();
  c_de->add_option("--size", de.cfg.size)->capture_default_str();
  c_de->add_option("--pixel", de.cfg.pixel_mm)->capture_default_str();
  c_de->add_option("--views", de.cfg.n_views)->capture_default_str();
  c_de->add_option("--ndet", de.cfg.n_det)->capture_default_str();
  c_de->add_option("--d1", de.cfg.d1_mm)->capture_default_str();
  c_de->add_option("--d2", de.cfg.d2_mm)->capture_default_str();
  c_de->add_option("--du", de.cfg.du_mm)->capture_default_str();
  c_de->add_option("--spp", de.cfg.samples_per_pixel)->capture_default_str();
  c_de->add_option("--filter", de.filter)->capture_default_str();
  c_de->add_option("--interp", de.interp)->capture_default_str();
  c_de->add_option("--out-dir", de.cfg.output_dir)->capture_default_str();

  FbpOpts fb;
  auto* c_fb = app.add_subcommand("fbp", "fan-beam filtered backprojection");
  c_fb->add_option("--sino", fb.sino, "input SGM1")->required()->check(CLI::ExistingFile);
  c_fb->add_option("--filter", fb.filter, "ram-lak | shepp-logan")->capture_default_str();
  c_fb->add_option("--interp", fb.interp, "linear | nearest")->capture_default_str();
  c_fb->add_option("--height", fb.height)->capture_default_str();
  c_fb->add_option("--width", fb.width)->capture_default_str();
  c_fb->add_option("--pixel", fb.pixel, "pixel size (mm)")->capture_default_str();
  c_fb->add_option("--out", fb.out, "output RVF1 image")->required();

  TvOpts tv;
  auto* c_tv = app.add_subcommand("tv", "SART with TV regularization");
  c_tv->add_option("--sino", tv.sino, "input SGM1")->required()->check(CLI::ExistingFile);
  c_tv->add_option("--init", tv.init, "initial image")->check(CLI::ExistingFile);
  c_tv->add_option("--outer", tv.cfg.n_outer)->capture_default_str();
  c_tv->add_option("--tv-steps", tv.cfg.n_tv_steps)->capture_default_str();
  c_tv->add_option("--tv-step", tv.cfg.tv_step_size)->capture_default_str();
  c_tv->add_option("--relaxation", tv.cfg.relaxation)->capture_default_str();
  c_tv->add_option("--stop-tol", tv.cfg.stop_tolerance)->capture_default_str();
  c_tv->add_option("--height", tv.cfg.height)->capture_default_str();
  c_tv->add_option("--width", tv.cfg.width)->capture_default_str();
  c_tv->add_option("--pixel", tv.cfg.pixel_mm)->capture_default_str();
  c_tv->add_option("--spp", tv.cfg.samples_per_pixel)->capture_default_str();
  c_tv->add_option("--out", tv.out, "output RVF1 image")->required();
  c_tv->add_option("--log", tv.log, "iteration CSV (default: <out>.log.csv)");

  FitOpts fi;
  auto* c_fi = app.add_subcommand("fit-field", "fit a neural field to sparse projections");
  c_fi->add_option("--views", fi.views, "FILE[:THETA,PHI] projections (repeatable)");
  c_fi->add_option("--views-preset", fi.preset, "simulate 1 | 2 | 5 | 10 views from --volume")
      ->check(CLI::IsMember({1, 2, 5, 10}));
  c_fi->add_option("--volume", fi.volume, "volume for --views-preset")->check(CLI::ExistingFile);
  c_fi->add_option("--box-mm", fi.box_mm, "side of the cubic field support (mm)");
  c_fi->add_option("--max-iters", fi.cfg.max_iters)->capture_default_str();
  c_fi->add_option("--stop-psnr", fi.cfg.stop_psnr, "stop once mean view PSNR reaches this (dB)")
      ->capture_default_str();
  c_fi->add_option("--eval-every", fi.cfg.eval_every)->capture_default_str();
  c_fi->add_option("--patch", fi.cfg.patch_size, "patch side (rays per step = patch^2)")->capture_default_str();
  c_fi->add_option("--samples", fi.samples, "samples per ray")->capture_default_str();
  c_fi->add_option("--lr", fi.lr)->capture_default_str();
  c_fi->add_option("--lambda-percep", fi.cfg.weights.percep)->capture_default_str();
  c_fi->add_option("--lambda-psnr", fi.cfg.weights.psnr)->capture_default_str();
  c_fi->add_option("--lambda-data", fi.cfg.weights.data)->capture_default_str();
  c_fi->add_option("--shape-widths", fi.shape_widths)->delimiter(',')->capture_default_str();
  c_fi->add_option("--density-widths", fi.density_widths)->delimiter(',')->capture_default_str();
  c_fi->add_option("--m-sh", fi.m_sh)->capture_default_str();
  c_fi->add_option("--m-a", fi.m_a)->capture_default_str();
  c_fi->add_option("--n-freq-pos", fi.n_freq_pos)->capture_default_str();
  c_fi->add_option("--n-freq-dir", fi.n_freq_dir)->capture_default_str();
  c_fi->add_option("--activation", fi.activation, "relu | tanh")->capture_default_str();
  c_fi->add_option("--out", fi.out, "checkpoint path")->required();
  c_fi->add_option("--log", fi.log, "fit CSV (default: <out>.log.csv)");
  fi.geo.add(c_fi);

  RenderOpts re;
  auto* c_re = app.add_subcommand("render", "render a projection from a fitted field");
  c_re->add_option("--field", re.field, "checkpoint")->required()->check(CLI::ExistingFile);
  c_re->add_option("--pose", re.pose, "THETA,PHI in degrees")->capture_default_str();
  c_re->add_option("--samples", re.samples)->capture_default_str();
  c_re->add_option("--out", re.out)->required();
  re.geo.add(c_re);

  ExtractOpts ex;
  auto* c_ex = app.add_subcommand("extract", "sample a fitted field on a voxel grid");
  c_ex->add_option("--field", ex.field, "checkpoint")->required()->check(CLI::ExistingFile);
  c_ex->add_option("--dims", ex.dims, "D,H,W")->delimiter(',')->capture_default_str();
  c_ex->add_option("--dir-pose", ex.dir_pose, "pose fed to the direction input")->capture_default_str();
  c_ex->add_option("--out", ex.out)->required();

  DecomposeOpts dc;
  auto* c_dc = app.add_subcommand("decompose", "three-material decomposition of low/high images");
  c_dc->add_option("--low", dc.low)->required()->check(CLI::ExistingFile);
  c_dc->add_option("--high", dc.high)->required()->check(CLI::ExistingFile);
  c_dc->add_option("--triplets", dc.triplets, "triplet library file")->required()->check(CLI::ExistingFile);
  c_dc->add_option("--spectral", dc.spectral, "spectral model (for 'auto' materials)")->check(CLI::ExistingFile);
  c_dc->add_option("--truth", dc.truth, "ground-truth prefix (<prefix><material>.rvf)");
  c_dc->add_option("--fraction-tol", dc.cfg.fraction_tol)->capture_default_str();
  c_dc->add_option("--out", dc.out, "output prefix")->required();

  EvalOpts ev;
  auto* c_ev = app.add_subcommand("eval", "compare two RVF1 files");
  c_ev->add_option("a", ev.a, "estimate")->required()->check(CLI::ExistingFile);
  c_ev->add_option("b", ev.b, "reference")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--max-val", ev.max_val, "dynamic range for PSNR/SSIM")->capture_default_str();
  c_ev->add_option("--alpha", ev.loss.alpha)->capture_default_str();
  c_ev->add_option("--beta", ev.loss.beta)->capture_default_str();
  c_ev->add_option("--out", ev.out, "also write the CSV here");

  std::string replay_path;
  auto* c_rp = app.add_subcommand("replay", "re-run a manifest and verify output hashes");
  c_rp->add_option("manifest", replay_path)->required()->check(CLI::ExistingFile);

  std::vector<const char*> cargv{"tomokit"};
  for (const auto& a : args) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (glob.threads > 0) set_worker_threads(glob.threads);
    if (c_rp->parsed()) return run_replay(replay_path);

    Runner r(glob);
    if (config_opt->count() > 0) r.config_file(config_opt->as<std::string>());
    fs::path manifest;
    if (c_ph->parsed()) {
      run_phantom(r, ph);
      manifest = default_manifest(ph.out, false, ph.kind == "breast");
    } else if (c_pr->parsed()) {
      run_project(r, pr);
      manifest = default_manifest(pr.out, true, false);
    } else if (c_si->parsed()) {
      run_sino(r, si);
      manifest = default_manifest(si.out, false, false);
    } else if (c_de->parsed()) {
      run_dect_cli(r, de);
      manifest = default_manifest(de.cfg.output_dir, true, false);
    } else if (c_fb->parsed()) {
      run_fbp(r, fb);
      manifest = default_manifest(fb.out, false, false);
    } else if (c_tv->parsed()) {
      run_tv(r, tv);
      manifest = default_manifest(tv.out, false, false);
    } else if (c_fi->parsed()) {
      run_fit(r, fi);
      manifest = default_manifest(fi.out, false, false);
    } else if (c_re->parsed()) {
      run_render(r, re);
      manifest = default_manifest(re.out, false, false);
    } else if (c_ex->parsed()) {
      run_extract(r, ex);
      manifest = default_manifest(ex.out, false, false);
    } else if (c_dc->parsed()) {
      run_decompose(r, dc);
      manifest = default_manifest(dc.out, false, true);
    } else if (c_ev->parsed()) {
      run_eval(r, ev);
      if (ev.out.empty()) return kExitOk;
      manifest = default_manifest(ev.out, false, false);
    }
    if (!glob.manifest.empty()) manifest = glob.manifest;

    json m;
    m["tool"] = "tomokit";
    m["version"] = kVersion;
    m["argv"] = args;
    m["cwd"] = fs::current_path().string();
    m["resolved_config"] = app.config_to_str(true, false);
    m["inputs"] = hashes(r.ledger.inputs);
    m["outputs"] = hashes(r.ledger.outputs);
    std::ofstream(manifest, std::ios::trunc) << m.dump(2) << '\n';
    return kExitOk;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    const bool config = e.stage() == "config" || e.stage() == "spectral" || e.stage() == "library";
    return config ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
