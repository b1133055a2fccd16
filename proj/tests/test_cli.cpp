#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "avo/cli.hpp"
#include "avo/tape.hpp"

namespace fs = std::filesystem;
using avo::cli::run;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("avo_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int call(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

const std::vector<std::string> kTinyFit{
    "fit-energy", "--target", "a",           "--T",          "2",   "--hidden",
    "4",          "--steps",  "20",          "--batch",      "8",   "--checkpoint_every",
    "10",         "--checkpoint_n", "10",    "--checkpoint_k", "2", "--final_n",
    "50",         "--final_k", "4",          "--log_z",      "0",   "--grid_n",
    "100",        "--grid_samples", "500"};

}  // namespace

TEST_CASE("config file parsing") {
  std::istringstream ok("# comment\n\nT = 3\nmode=avo\n");
  const auto kv = avo::cli::parse_config(ok);
  CHECK(kv.at("T") == "3");
  CHECK(kv.at("mode") == "avo");
  std::istringstream dup("T=1\nT=2\n");
  CHECK_THROWS_WITH_AS(avo::cli::parse_config(dup), doctest::Contains("line 2"), avo::Error);
  std::istringstream bad("T\n");
  CHECK_THROWS_AS(avo::cli::parse_config(bad), avo::Error);
}

TEST_CASE("invalid input exits with code 1") {
  std::string err;
  CHECK(call({"fit-energy", "--T", "0", "--out", scratch_dir("t0").string()}, &err) == 1);
  CHECK_FALSE(err.empty());
  CHECK(call({"fit-energy", "--no-such-flag", "1"}) == 1);
  CHECK(call({"fit-energy", "--mode", "kl"}) == 1);
  CHECK(call({"fit-energy", "--target", "q"}) == 1);
  CHECK(call({"frobnicate"}) == 1);
  CHECK(call({}) == 1);
  CHECK(call({"eval", "--checkpoint", "/nonexistent/ckpt.txt"}) == 1);
  CHECK_THROWS_AS(avo::cli::known_keys("frobnicate"), avo::Error);
}

TEST_CASE("fit-energy writes its outputs and replays from config.resolved") {
  const fs::path dir = scratch_dir("fit");
  auto args = kTinyFit;
  args.insert(args.end(), {"--out", dir.string()});
  REQUIRE(call(args) == 0);
  for (const char* f : {"config.resolved", "metrics.csv", "summary.csv", "checkpoint.txt",
                        "target_density.csv", "target_density.pgm", "chain_density.csv",
                        "chain_density.pgm"}) {
    CAPTURE(f);
    CHECK(fs::exists(dir / f));
  }
  const std::string metrics = slurp(dir / "metrics.csv");
  CHECK(metrics.rfind("target,mode,rho,trial,step,metric,value\n", 0) == 0);

  // every known key appears in config.resolved
  std::ifstream resolved(dir / "config.resolved");
  const auto kv = avo::cli::parse_config(resolved);
  for (const auto& k : avo::cli::known_keys("fit-energy")) CHECK(kv.count(k) == 1);

  // replay into a second directory gives identical metrics
  const fs::path dir2 = scratch_dir("fit_replay");
  REQUIRE(call({"fit-energy", "--config", (dir / "config.resolved").string(), "--out",
                dir2.string()}) == 0);
  CHECK(slurp(dir2 / "metrics.csv") == metrics);

  // the checkpoint can be evaluated
  const fs::path dir3 = scratch_dir("eval");
  CHECK(call({"eval", "--checkpoint", (dir / "checkpoint.txt").string(), "--target", "a",
              "--n", "20", "--k", "2", "--log_z", "0", "--out", dir3.string()}) == 0);
  CHECK(fs::exists(dir3 / "metrics.csv"));
  CHECK(call({"eval", "--checkpoint", (dir / "checkpoint.txt").string(), "--target",
              "gaussian1d", "--out", dir3.string()}) == 1);

  // render a grid to PGM
  const fs::path pgm = dir / "rendered.pgm";
  REQUIRE(call({"render", "--input", (dir / "target_density.csv").string(), "--out",
                pgm.string()}) == 0);
  std::ifstream is(pgm);
  std::string magic;
  std::size_t w = 0, h = 0;
  is >> magic >> w >> h;
  CHECK(magic == "P2");
  CHECK(w == 100);
  CHECK(h == 100);
}

TEST_CASE("config file keys are validated and flags override them") {
  const fs::path dir = scratch_dir("cfg");
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "bad.cfg");
    os << "T=2\nwidth=3\n";
  }
  CHECK(call({"fit-energy", "--config", (dir / "bad.cfg").string()}) == 1);
  {
    std::ofstream os(dir / "good.cfg");
    os << "T=0\n";
  }
  auto args = kTinyFit;
  args.insert(args.end(), {"--config", (dir / "good.cfg").string(), "--out",
                           (dir / "run").string()});
  // --T 2 from the flag list wins over T=0 in the file
  CHECK(call(args) == 0);
}

TEST_CASE("render curve aggregates final values per cell") {
  const fs::path dir = scratch_dir("curve");
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "metrics.csv");
    os << "target,mode,rho,trial,step,metric,value\n"
       << "a,avo,0,0,10,final_neg_kl,-1\n"
       << "a,avo,0,1,10,final_neg_kl,-3\n"
       << "a,avo,0,1,10,objective,7\n"
       << "a,elbo,0.2,0,10,final_neg_kl,-2\n";
  }
  REQUIRE(call({"render", "--kind", "curve", "--input", (dir / "metrics.csv").string()}) == 0);
  const std::string curves = slurp(dir / "curves.csv");
  CHECK(curves ==
        "target,mode,rho,n,mean_neg_kl,std_neg_kl\n"
        "a,avo,0,2,-2,1.4142135623730951\n"
        "a,elbo,0.2,1,-2,0\n");
  {
    std::ofstream os(dir / "empty.csv");
    os << "target,mode,rho,trial,step,metric,value\n";
  }
  CHECK(call({"render", "--kind", "curve", "--input", (dir / "empty.csv").string()}) == 1);
  CHECK(call({"render", "--kind", "bars", "--input", (dir / "metrics.csv").string()}) == 1);
}
