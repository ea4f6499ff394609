#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"
#include "oracles.hpp"
#include "tomokit/io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kData = TOMOKIT_DATA_DIR;

struct CliRun {
  int rc = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Runs the CLI inside `cwd` with stdout and stderr captured together.
CliRun cli(const fs::path& cwd, const std::string& args, const std::string& env = "") {
  const fs::path log = cwd / ".cli_output";
  const std::string cmd = "cd '" + cwd.string() + "' && " + env + " '" + std::string(TOMOKIT_CLI_PATH) + "' " +
                          args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(log);
  return r;
}

std::map<std::string, std::string> csv_row(const std::string& text) {
  std::istringstream is(text);
  std::string head, vals;
  std::getline(is, head);
  std::getline(is, vals);
  std::map<std::string, std::string> row;
  std::istringstream h(head), v(vals);
  std::string k, x;
  while (std::getline(h, k, ',') && std::getline(v, x, ',')) row[k] = x;
  return row;
}

// All regular files below `dir`, keyed by relative path, except `skip`.
std::map<std::string, std::string> tree(const fs::path& dir, const std::string& skip = ".cli_output") {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != skip)
      files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

const char* kFitFlags =
    "--max-iters 20 --eval-every 10 --patch 8 --samples 8 --shape-widths 16,16 --density-widths 8 "
    "--n-freq-pos 2 --n-freq-dir 1";

// phantom -> projections -> field fit -> extraction, all single-threaded.
void fit_chain(const fs::path& d) {
  ASSERT_EQ(cli(d, "--threads 1 phantom --kind two-sphere --size 16 --out vol.rvf").rc, 0);
  ASSERT_EQ(cli(d, "--threads 1 project --volume vol.rvf --views-preset 2 --samples 32 --nu 20 --nv 20 --du 1.2 "
                   "--dv 1.2 --out views")
                .rc,
            0);
  const CliRun f = cli(d, std::string("--threads 1 --seed 5 fit-field --views views/view_0.rvf views/view_1.rvf ") +
                           kFitFlags + " --out field.ckpt");
  ASSERT_EQ(f.rc, 0) << f.out;
  ASSERT_EQ(cli(d, "--threads 1 extract --field field.ckpt --dims 8,8,8 --out field.rvf").rc, 0);
}

}  // namespace

TEST(Cli, VersionAndUsage) {
  oracle::TempDir d("cli_usage");
  const CliRun v = cli(d.path(), "--version");
  EXPECT_EQ(v.rc, 0);
  EXPECT_FALSE(v.out.empty());
  EXPECT_EQ(cli(d.path(), "").rc, 2);
  EXPECT_EQ(cli(d.path(), "frobnicate").rc, 2);
  EXPECT_EQ(cli(d.path(), "phantom --kind cube --out x.rvf --bogus 1").rc, 2);
  EXPECT_EQ(cli(d.path(), "phantom --kind teapot --out x.rvf").rc, 2);
  EXPECT_EQ(cli(d.path(), "project --volume x.rvf --views-preset 3 --out v").rc, 2);
}

TEST(Cli, EvalOfIdenticalFiles) {
  oracle::TempDir d("cli_eval");
  ASSERT_EQ(cli(d.path(), "phantom --kind disk --size 64 --out a.rvf").rc, 0);
  const CliRun r = cli(d.path(), "eval a.rvf a.rvf");
  ASSERT_EQ(r.rc, 0) << r.out;
  const auto row = csv_row(r.out);
  EXPECT_EQ(row.at("rmse"), "0");
  EXPECT_EQ(row.at("mae"), "0");
  EXPECT_EQ(row.at("ssim"), "1");
  EXPECT_EQ(row.at("ms_ssim"), "1");
}

TEST(Cli, MissingInputNamesThePath) {
  oracle::TempDir d("cli_missing");
  const CliRun r = cli(d.path(), "eval nowhere_a.rvf nowhere_b.rvf");
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.out.find("nowhere_a.rvf"), std::string::npos) << r.out;
  const CliRun f = cli(d.path(), "fit-field --views ghost.rvf:0,0 --out f.ckpt");
  EXPECT_EQ(f.rc, 2);
  EXPECT_NE(f.out.find("ghost.rvf"), std::string::npos) << f.out;
  const CliRun c = cli(d.path(), "--config absent.cfg phantom --kind cube --out x.rvf");
  EXPECT_EQ(c.rc, 2);
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  oracle::TempDir d("cli_config");
  std::ofstream(d / "run.cfg") << "seed=3\n[phantom]\nkind=cube\nsize=12\nout=cfg.rvf\n";
  ASSERT_EQ(cli(d.path(), "--config run.cfg phantom").rc, 0);
  EXPECT_EQ(tomokit::load_volume(d / "cfg.rvf").dims, (std::array<int, 3>{12, 12, 12}));
  ASSERT_EQ(cli(d.path(), "--config run.cfg phantom --size 10").rc, 0);
  EXPECT_EQ(tomokit::load_volume(d / "cfg.rvf").dims, (std::array<int, 3>{10, 10, 10}));
  const auto m = nlohmann::json::parse(slurp(d / "cfg.rvf.manifest.json"));
  EXPECT_NE(m.at("resolved_config").get<std::string>().find("size=10"), std::string::npos);
  std::ofstream(d / "bad.cfg") << "[phantom]\nkind=cube\ncolour=blue\n";
  EXPECT_EQ(cli(d.path(), "--config bad.cfg phantom --out y.rvf").rc, 2);
}

TEST(Cli, DectSimFromConfig) {
  oracle::TempDir d("cli_dect");
  std::ofstream(d / "dect.cfg") << "seed=1\n[dect-sim]\nspectral=" << (kData / "spectral_default.txt").string()
                                << "\ntriplets=" << (kData / "triplets_breast.txt").string()
                                << "\nsize=64\npixel=1.6\nviews=64\nndet=256\ndu=0.5\nout-dir=dect\n";
  const CliRun r = cli(d.path(), "--threads 1 --config dect.cfg dect-sim");
  ASSERT_EQ(r.rc, 0) << r.out;
  EXPECT_TRUE(fs::exists(d / "dect" / "report.csv"));
  EXPECT_TRUE(fs::exists(d / "dect" / "manifest.json"));
  const CliRun bad = cli(d.path(), "--config dect.cfg dect-sim --spectral missing_model.txt");
  EXPECT_EQ(bad.rc, 2);
  EXPECT_NE(bad.out.find("missing_model.txt"), std::string::npos);
  const CliRun stage = cli(d.path(), "--config dect.cfg dect-sim --size 8");
  EXPECT_EQ(stage.rc, 2);
  EXPECT_NE(stage.out.find("stage 'config'"), std::string::npos) << stage.out;
}

TEST(Cli, SingleThreadedRunsAreByteIdentical) {
  oracle::TempDir a("cli_repro_a"), b("cli_repro_b");
  for (const auto* d : {&a, &b}) {
    fit_chain(d->path());
    ASSERT_EQ(cli(d->path(), "--threads 1 phantom --kind disk --size 64 --out disk.rvf").rc, 0);
    ASSERT_EQ(cli(d->path(), "--threads 1 sino --image disk.rvf --views 90 --ndet 128 --out disk.sgm").rc, 0);
    ASSERT_EQ(cli(d->path(), "--threads 1 fbp --sino disk.sgm --height 64 --width 64 --out fbp.rvf").rc, 0);
    ASSERT_EQ(cli(d->path(), "--threads 1 tv --sino disk.sgm --outer 2 --height 64 --width 64 --out tv.rvf").rc, 0);
  }
  auto ta = tree(a.path()), tb = tree(b.path());
  ASSERT_EQ(ta.size(), tb.size());
  for (const auto& [name, bytes] : ta) {
    ASSERT_TRUE(tb.count(name)) << name;
    if (name.find("manifest") != std::string::npos) continue;  // records the working directory
    EXPECT_TRUE(bytes == tb[name]) << name;
  }
}

TEST(Cli, FitHonorsStopPsnr) {
  oracle::TempDir d("cli_stop");
  ASSERT_EQ(cli(d.path(), "phantom --kind two-sphere --size 16 --out vol.rvf").rc, 0);
  ASSERT_EQ(cli(d.path(), "project --volume vol.rvf --pose 0,0 --pose 90,0 --samples 32 --nu 20 --nv 20 --du 1.2 "
                          "--dv 1.2 --out views")
                .rc,
            0);
  const std::string base =
      std::string("fit-field --views views/view_0.rvf:0,0 views/view_1.rvf:90,0 ") + kFitFlags + " --out f.ckpt";
  const CliRun low = cli(d.path(), base + " --stop-psnr -100");
  ASSERT_EQ(low.rc, 0) << low.out;
  EXPECT_NE(low.out.find("iterations,10\n"), std::string::npos) << low.out;
  EXPECT_NE(low.out.find("reached_stop_psnr,1"), std::string::npos);
  const CliRun high = cli(d.path(), base + " --stop-psnr 25");
  ASSERT_EQ(high.rc, 0) << high.out;
  EXPECT_NE(high.out.find("iterations,20\n"), std::string::npos) << high.out;
  EXPECT_NE(high.out.find("reached_stop_psnr,0"), std::string::npos);
  const auto evals = slurp(d / "f.ckpt.eval.csv");
  EXPECT_EQ(evals.rfind("iter,mean_view_psnr\n", 0), 0u);
}

TEST(Cli, ManifestReplay) {
  oracle::TempDir d("cli_replay");
  fit_chain(d.path());
  const auto m = nlohmann::json::parse(slurp(d / "field.ckpt.manifest.json"));
  EXPECT_FALSE(m.at("inputs").empty());
  EXPECT_FALSE(m.at("outputs").empty());
  for (const char* man : {"vol.rvf.manifest.json", "views/manifest.json", "field.ckpt.manifest.json",
                          "field.rvf.manifest.json"}) {
    const CliRun r = cli(d.path(), std::string("--threads 1 replay ") + man);
    EXPECT_EQ(r.rc, 0) << man << ": " << r.out;
    EXPECT_NE(r.out.find("outputs identical"), std::string::npos) << r.out;
  }
  // A changed input is detected before anything is re-run.
  std::ofstream(d / "views" / "view_0.rvf", std::ios::app) << ' ';
  const CliRun r = cli(d.path(), "replay field.ckpt.manifest.json");
  EXPECT_EQ(r.rc, 3);
  EXPECT_NE(r.out.find("view_0.rvf"), std::string::npos) << r.out;
}

TEST(Cli, ThreadCapFromEnvironment) {
  oracle::TempDir d("cli_env");
  ASSERT_EQ(cli(d.path(), "phantom --kind disk --size 64 --out disk.rvf").rc, 0);
  ASSERT_EQ(cli(d.path(), "sino --image disk.rvf --views 45 --ndet 128 --out a.sgm", "TOMOKIT_THREADS=1").rc, 0);
  ASSERT_EQ(cli(d.path(), "--threads 1 sino --image disk.rvf --views 45 --ndet 128 --out b.sgm").rc, 0);
  EXPECT_EQ(slurp(d / "a.sgm.raw"), slurp(d / "b.sgm.raw"));
}
