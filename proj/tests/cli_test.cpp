#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "eqdistill/distill.hpp"
#include "eqdistill/eval.hpp"

using namespace eqdistill;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run_cli(const std::string& args) {
  std::string cmd = std::string(EQDISTILL_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  EXPECT_NE(pipe, nullptr);
  RunResult r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string fresh_dir(const std::string& name) {
  std::string dir = testing::TempDir() + name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// A complete run config for the 4x4 micro model, with the dataset and run
// directory rooted in `dir`.
std::string micro_config(const std::string& dir, std::size_t dim = 8,
                         std::size_t iterations = 60) {
  std::ostringstream o;
  o << "[teacher]\n"
       "components = 2\n"
       "classes = 2\n"
       "height = 4\n"
       "width = 4\n"
       "channels = 1\n"
       "std_dev = 0.05\n"
       "steps = 6\n"
       "[model]\n"
       "type = get\n"
       "height = 4\n"
       "width = 4\n"
       "channels = 1\n"
       "patch = 2\n"
    << "dim = " << dim << "\n"
    << "injection_depth = 1\n"
       "equilibrium_depth = 1\n"
       "expansion = 2\n"
       "heads = 1\n"
       "unroll_steps = 2\n"
       "[training]\n"
    << "iterations = " << iterations << "\n"
    << "batch = 8\n"
       "lr = 1e-3\n"
       "ema_momentum = 0.5\n"
       "checkpoint_interval = 30\n"
       "[paths]\n"
    << "dataset = " << dir << "/pairs.getp\n"
    << "run_dir = " << dir << "/run\n";
  return o.str();
}

std::string write_config(const std::string& dir, const std::string& text) {
  std::string path = dir + "/run.cfg";
  std::ofstream(path) << text;
  return path;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

// The checksum line from gen-data output, or "" when missing.
std::string checksum_line(const std::string& out) {
  std::size_t at = out.find("checksum ");
  if (at == std::string::npos) return "";
  return out.substr(at, out.find('\n', at) - at);
}

double csv_value(const std::string& out, const std::string& metric) {
  std::size_t at = out.find(metric + ",");
  EXPECT_NE(at, std::string::npos) << "missing csv row " << metric;
  if (at == std::string::npos) return 0.0;
  at += metric.size() + 1;
  return std::stod(out.substr(at, out.find('\n', at) - at));
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  std::string dir = fresh_dir("cli_gen");
  std::string cfg = write_config(dir, micro_config(dir));

  std::string args = "gen-data --config " + cfg + " --count 12 --seed 3 --out " + dir + "/a.getp";
  RunResult first = run_cli(args);
  ASSERT_EQ(first.code, 0) << first.out;
  EXPECT_NE(first.out.find("records 12"), std::string::npos);
  EXPECT_NE(first.out.find("nfe_total 132"), std::string::npos);  // 12 records, 11 calls each
  EXPECT_NE(first.out.find("resolved config:"), std::string::npos);

  RunResult again = run_cli("gen-data --config " + cfg + " --count 12 --seed 3 --out " + dir +
                            "/b.getp");
  ASSERT_EQ(again.code, 0);
  ASSERT_NE(checksum_line(first.out), "");
  EXPECT_EQ(checksum_line(first.out), checksum_line(again.out));
  EXPECT_EQ(slurp(dir + "/a.getp"), slurp(dir + "/b.getp"));

  RunResult other = run_cli("gen-data --config " + cfg + " --count 12 --seed 9 --out " + dir +
                            "/c.getp");
  ASSERT_EQ(other.code, 0);
  EXPECT_NE(checksum_line(first.out), checksum_line(other.out));
  fs::remove_all(dir);
}

TEST(Cli, UsageErrorsExitTwo) {
  std::string dir = fresh_dir("cli_usage");
  std::string cfg = write_config(dir, micro_config(dir));
  EXPECT_EQ(run_cli("gen-data --config " + cfg + " --count 4").code, 2);  // --out missing
  EXPECT_EQ(run_cli("").code, 2);                                         // subcommand required
  EXPECT_EQ(run_cli("transmogrify").code, 2);
  EXPECT_EQ(run_cli("gen-data --config " + cfg + " --count 4 --out x --precision f16").code, 2);
  fs::remove_all(dir);
}

TEST(Cli, BadConfigExitsTwoWithDiagnostic) {
  std::string dir = fresh_dir("cli_badcfg");
  std::string cfg = write_config(dir, "[teacher]\nbogus = 1\n");
  RunResult r = run_cli("gen-data --config " + cfg + " --count 4 --out " + dir + "/x.getp");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("unknown key teacher.bogus"), std::string::npos) << r.out;
  fs::remove_all(dir);
}

TEST(Cli, TrainWritesRunArtifacts) {
  std::string dir = fresh_dir("cli_train");
  std::string cfg = write_config(dir, micro_config(dir));
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 16 --seed 3 --out " + dir +
                    "/pairs.getp")
                .code,
            0);

  RunResult r = run_cli("train --config " + cfg);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("final checkpoint"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir + "/run/final.getc"));
  EXPECT_TRUE(fs::exists(dir + "/run/ckpt_00000030.getc"));
  EXPECT_TRUE(fs::exists(dir + "/run/config_resolved.txt"));

  std::string metrics = slurp(dir + "/run/metrics.csv");
  EXPECT_EQ(metrics.rfind("iteration,loss,grad_norm,wallclock_seconds\n", 0), 0u);
  fs::remove_all(dir);
}

TEST(Cli, TrainMissingDatasetExitsThree) {
  std::string dir = fresh_dir("cli_nodata");
  std::string cfg = write_config(dir, micro_config(dir));
  RunResult r = run_cli("train --config " + cfg);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("error:"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, SampleIsSeededAndSolverDepthMatters) {
  std::string dir = fresh_dir("cli_sample");
  std::string cfg = write_config(dir, micro_config(dir));
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 16 --seed 3 --out " + dir +
                    "/pairs.getp")
                .code,
            0);
  ASSERT_EQ(run_cli("train --config " + cfg).code, 0);
  std::string ckpt = dir + "/run/final.getc";

  RunResult a = run_cli("sample " + ckpt + " --n 4 --seed 5 --k 2 --out " + dir + "/a.pgm");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("wrote"), std::string::npos);
  // 4 samples of 4x4 in a 2-wide grid: 8x8 graymap plus its header.
  std::string grid = slurp(dir + "/a.pgm");
  EXPECT_EQ(grid.rfind("P5\n8 8\n255\n", 0), 0u);
  EXPECT_EQ(grid.size(), 11u + 64u);
  EXPECT_EQ(fs::file_size(dir + "/a.pgm.raw"), 4u * 16u * sizeof(float));

  ASSERT_EQ(run_cli("sample " + ckpt + " --n 4 --seed 5 --k 2 --out " + dir + "/b.pgm").code, 0);
  EXPECT_EQ(slurp(dir + "/a.pgm"), slurp(dir + "/b.pgm"));
  EXPECT_EQ(slurp(dir + "/a.pgm.raw"), slurp(dir + "/b.pgm.raw"));

  ASSERT_EQ(run_cli("sample " + ckpt + " --n 4 --seed 5 --k 6 --out " + dir + "/c.pgm").code, 0);
  EXPECT_NE(slurp(dir + "/a.pgm.raw"), slurp(dir + "/c.pgm.raw"));

  ASSERT_EQ(run_cli("sample " + ckpt + " --n 4 --seed 6 --k 2 --out " + dir + "/d.pgm").code, 0);
  EXPECT_NE(slurp(dir + "/a.pgm.raw"), slurp(dir + "/d.pgm.raw"));

  RunResult labelled = run_cli("sample " + ckpt + " --n 2 --label 1 --out " + dir + "/e.pgm");
  EXPECT_EQ(labelled.code, 2);  // unconditional model
  EXPECT_NE(labelled.out.find("unconditional"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, SampleRejectsMismatchedConfig) {
  std::string dir = fresh_dir("cli_mismatch");
  std::string cfg = write_config(dir, micro_config(dir));
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 16 --seed 3 --out " + dir +
                    "/pairs.getp")
                .code,
            0);
  ASSERT_EQ(run_cli("train --config " + cfg).code, 0);

  std::string wide = dir + "/wide.cfg";
  std::ofstream(wide) << micro_config(dir, 16);
  RunResult r = run_cli("sample " + dir + "/run/final.getc --n 2 --config " + wide + " --out " +
                        dir + "/x.pgm");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("get h="), std::string::npos) << r.out;
  fs::remove_all(dir);
}

TEST(Cli, MissingCheckpointExitsThree) {
  std::string dir = fresh_dir("cli_nockpt");
  RunResult r = run_cli("sample " + dir + "/absent.getc --n 2 --out " + dir + "/x.pgm");
  EXPECT_EQ(r.code, 3);
  fs::remove_all(dir);
}

TEST(Cli, EvalReportMatchesLibrary) {
  std::string dir = fresh_dir("cli_eval");
  std::string cfg = write_config(dir, micro_config(dir));
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 16 --seed 3 --out " + dir +
                    "/pairs.getp")
                .code,
            0);
  ASSERT_EQ(run_cli("train --config " + cfg).code, 0);
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 32 --seed 7 --out " + dir +
                    "/heldout.getp")
                .code,
            0);

  RunResult r = run_cli("eval " + dir + "/run/final.getc " + dir + "/heldout.getp --config " +
                        cfg);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("metric,value"), std::string::npos);
  EXPECT_NE(r.out.find("sliced_wasserstein,"), std::string::npos);
  EXPECT_NE(r.out.find("nfe_offline,"), std::string::npos);
  EXPECT_GT(csv_value(r.out, "samples_per_second"), 0.0);
  EXPECT_EQ(csv_value(r.out, "nfe_offline"), 32.0 * 11.0);
  // Unconditional model: no class accuracy row.
  EXPECT_EQ(r.out.find("class_accuracy"), std::string::npos);

  // The printed fidelity must equal the library's own number for the same
  // EMA weights and held-out set.
  CheckpointInfo info;
  auto st = load_checkpoint<float>(dir + "/run/final.getc", {}, &info);
  auto weights = with_ema(st.params, st.ema);
  auto heldout = PairDataset::load(dir + "/heldout.getp");
  EXPECT_DOUBLE_EQ(csv_value(r.out, "l1_fidelity"), l1_fidelity(weights, info.config, heldout));
  fs::remove_all(dir);
}

TEST(Cli, PrecisionFlagRoundTrips) {
  std::string dir = fresh_dir("cli_f64");
  std::string cfg = write_config(dir, micro_config(dir));
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 16 --seed 3 --out " + dir +
                    "/pairs.getp")
                .code,
            0);
  ASSERT_EQ(run_cli("--precision f64 train --config " + cfg).code, 0);
  ASSERT_EQ(run_cli("--precision f64 sample " + dir + "/run/final.getc --n 2 --out " + dir +
                    "/a.pgm")
                .code,
            0);

  // Loading an f64 checkpoint at the default f32 width is a config error.
  RunResult narrow = run_cli("sample " + dir + "/run/final.getc --n 2 --out " + dir + "/b.pgm");
  EXPECT_EQ(narrow.code, 2);
  fs::remove_all(dir);
}

TEST(Cli, NumericBlowUpExitsFour) {
  std::string dir = fresh_dir("cli_nan");
  std::string cfg = write_config(dir, micro_config(dir));
  ASSERT_EQ(run_cli("gen-data --config " + cfg + " --count 16 --seed 3 --out " + dir +
                    "/pairs.getp")
                .code,
            0);

  // Poison the first stored noise value; the NaN reaches the gradients and
  // the optimizer refuses the step.
  std::fstream f(dir + "/pairs.getp", std::ios::in | std::ios::out | std::ios::binary);
  ASSERT_TRUE(f.good());
  f.seekp(29);  // magic 4 | version 4 | count 8 | dims 12 | conditional 1
  float nan = std::numeric_limits<float>::quiet_NaN();
  f.write(reinterpret_cast<const char*>(&nan), sizeof nan);
  f.close();

  RunResult r = run_cli("train --config " + cfg);
  EXPECT_EQ(r.code, 4) << r.out;
  EXPECT_NE(r.out.find("error:"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, HelpExitsZero) {
  RunResult r = run_cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-data"), std::string::npos);
  EXPECT_NE(r.out.find("sample"), std::string::npos);
}
