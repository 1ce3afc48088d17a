#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#ifndef VDP_CLI_PATH
#error "VDP_CLI_PATH must point at the built CLI binary"
#endif

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

fs::path work_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "vdp_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out_file = work_root() / ("stdout_" + std::to_string(counter));
  const fs::path err_file = work_root() / ("stderr_" + std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(VDP_CLI_PATH) + " " + args + " >" + out_file.string() +
                          " 2>" + err_file.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

std::string write_file(const std::string& name, const std::string& text) {
  const fs::path p = work_root() / name;
  std::ofstream out(p);
  out << text;
  return p.string();
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string minimal_config(const std::string& extra = "") {
  return std::string("dataset=eight_gaussians\n") + "dataset_n=300\n" + "latent_dim=2\n" +
         "encoder_hidden=8\n" + "decoder_hidden=8\n" + "epochs=1\n" +
         "batch_size=64\n" + "lr=0.001\n" + "seed=5\n" + extra;
}

void write_u32be(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::string write_idx_fixture(const std::string& name, std::uint32_t count) {
  const fs::path p = work_root() / name;
  std::ofstream out(p, std::ios::binary);
  write_u32be(out, 0x00000803u);
  write_u32be(out, count);
  write_u32be(out, 8);
  write_u32be(out, 8);
  for (std::size_t i = 0; i < static_cast<std::size_t>(count) * 64; ++i) {
    const unsigned char byte = static_cast<unsigned char>((i * 83 + 7) % 256);
    out.write(reinterpret_cast<const char*>(&byte), 1);
  }
  return p.string();
}

std::string train_toy_checkpoint(const std::string& tag, const std::string& extra = "") {
  const std::string cfg = write_file("cfg_" + tag + ".cfg", minimal_config(extra));
  const std::string out = (work_root() / ("out_" + tag)).string();
  RunResult r = run_cli("train --config " + cfg + " --out " + out);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  return out + "/best.ckpt";
}

}  // namespace

TEST(CliTrain, MinimalConfigWritesThreeFiles) {
  const std::string cfg = write_file("minimal.cfg", minimal_config());
  const std::string out = (work_root() / "out_minimal").string();
  RunResult r = run_cli("train --config " + cfg + " --out " + out);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    ++files;
    (void)e;
  }
  EXPECT_EQ(files, 3u);
  EXPECT_TRUE(fs::exists(out + "/best.ckpt"));
  EXPECT_TRUE(fs::exists(out + "/final.ckpt"));
  EXPECT_TRUE(fs::exists(out + "/metrics.csv"));
  EXPECT_NE(r.out.find("epoch 1"), std::string::npos);
}

TEST(CliTrain, MissingDiffusionTNamesTheKey) {
  const std::string cfg = write_file(
      "missing_t.cfg", minimal_config("prior=diffusion\nbeta_min=0.01\nbeta_max=0.2\n"));
  RunResult r = run_cli("train --config " + cfg + " --out " + (work_root() / "out_mt").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("'T'"), std::string::npos) << r.err;
}

TEST(CliTrain, UnknownKeyAndBadNumberAreConfigErrors) {
  const std::string cfg = write_file("unknown.cfg", minimal_config("frobnicate=1\n"));
  RunResult r = run_cli("train --config " + cfg + " --out " + (work_root() / "out_uk").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos) << r.err;

  const std::string cfg2 = write_file("badnum.cfg", "latent_dim=2\nlr=fast\n");
  RunResult r2 = run_cli("train --config " + cfg2 + " --out " + (work_root() / "out_bn").string());
  EXPECT_EQ(r2.exit_code, 2);
  EXPECT_NE(r2.err.find("line 2"), std::string::npos) << r2.err;
}

TEST(CliTrain, IdenticalConfigAndSeedGiveIdenticalMetrics) {
  const std::string cfg = write_file("det.cfg", minimal_config());
  const std::string out1 = (work_root() / "out_det1").string();
  const std::string out2 = (work_root() / "out_det2").string();
  EXPECT_EQ(run_cli("train --config " + cfg + " --out " + out1).exit_code, 0);
  EXPECT_EQ(run_cli("train --config " + cfg + " --out " + out2).exit_code, 0);
  EXPECT_EQ(read_bytes(out1 + "/metrics.csv"), read_bytes(out2 + "/metrics.csv"));
}

TEST(CliTrain, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli("train").exit_code, 1);           // missing --config
  EXPECT_EQ(run_cli("frobnicate").exit_code, 1);      // unknown subcommand
  EXPECT_EQ(run_cli("").exit_code, 1);                // no subcommand
}

TEST(CliSample, CsvRowsAndDeterminism) {
  const std::string ckpt = train_toy_checkpoint("sample_csv");
  const std::string out1 = (work_root() / "s1.csv").string();
  const std::string out2 = (work_root() / "s2.csv").string();
  RunResult r = run_cli("sample --checkpoint " + ckpt + " --n 5 --seed 3 --format csv --out " +
                        out1);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  std::ifstream in(out1);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "x0,x1");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 1);
    ++rows;
  }
  EXPECT_EQ(rows, 5u);

  EXPECT_EQ(run_cli("sample --checkpoint " + ckpt + " --n 5 --seed 3 --format csv --out " + out2)
                .exit_code,
            0);
  EXPECT_EQ(read_bytes(out1), read_bytes(out2));
}

TEST(CliSample, PpmGridTiling) {
  const std::string idx = write_idx_fixture("imgs.idx", 60);
  const std::string cfg = write_file(
      "img.cfg", "dataset=idx:" + idx +
                     "\nlatent_dim=2\nprior=gaussian\nencoder_hidden=8\ndecoder_hidden=8\n"
                     "likelihood=bernoulli\nbinarize_threshold=0.5\nepochs=1\nbatch_size=16\n"
                     "lr=0.001\nseed=2\n");
  const std::string out = (work_root() / "out_img").string();
  ASSERT_EQ(run_cli("train --config " + cfg + " --out " + out).exit_code, 0);

  const std::string ppm = (work_root() / "grid.ppm").string();
  RunResult r = run_cli("sample --checkpoint " + out + "/best.ckpt" +
                        " --n 16 --seed 1 --format ppm --grid 4 4 --out " + ppm);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const std::vector<char> bytes = read_bytes(ppm);
  const std::string header = "P6\n35 35\n255\n";  // 4 tiles of 8px + 3 separators
  ASSERT_GT(bytes.size(), header.size());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())),
            header);
  EXPECT_EQ(bytes.size(), header.size() + 35u * 35u * 3u);

  // Grid larger than the sample count is rejected.
  EXPECT_EQ(run_cli("sample --checkpoint " + out + "/best.ckpt" +
                    " --n 8 --format ppm --grid 4 4 --out " + ppm)
                .exit_code,
            2);
}

TEST(CliSample, NonSquarePixelCountRejectedForPpm) {
  const std::string ckpt = train_toy_checkpoint("sample_ppm2d");
  RunResult r = run_cli("sample --checkpoint " + ckpt + " --n 4 --format ppm --grid 2 2 --out " +
                        (work_root() / "bad.ppm").string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("square"), std::string::npos) << r.err;
}

TEST(CliEval, ElboAndMmdReports) {
  const std::string ckpt = train_toy_checkpoint("eval");
  const std::string csv = (work_root() / "eval.csv").string();
  RunResult r = run_cli("eval --checkpoint " + ckpt + " --metric elbo --n-mc 2 --out-csv " + csv);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("elbo,", 0), 0u) << r.out;
  double value = 0.0, se = 0.0;
  ASSERT_EQ(std::sscanf(r.out.c_str(), "elbo,%lf,%lf", &value, &se), 2);
  EXPECT_TRUE(std::isfinite(value));
  EXPECT_GE(se, 0.0);

  RunResult r2 =
      run_cli("eval --checkpoint " + ckpt + " --metric mmd --n 200 --out-csv " + csv);
  EXPECT_EQ(r2.exit_code, 0) << r2.err;
  EXPECT_EQ(r2.out.rfind("mmd2,", 0), 0u) << r2.out;

  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "metric,value,stderr");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 2u);
}

TEST(CliEval, UnknownMetricListsValidOnes) {
  const std::string ckpt = train_toy_checkpoint("eval_bad");
  RunResult r = run_cli("eval --checkpoint " + ckpt + " --metric fid");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("elbo"), std::string::npos);
  EXPECT_NE(r.err.find("mmd"), std::string::npos);
}

TEST(CliDiagnose, DecompositionLinesAndRegrouping) {
  const std::string ckpt = train_toy_checkpoint(
      "diag", "prior=diffusion\nT=4\nbeta_min=0.05\nbeta_max=0.3\ndenoiser_hidden=8\n");
  RunResult r = run_cli("diagnose --checkpoint " + ckpt + " --n-mc 2");
  EXPECT_EQ(r.exit_code, 0) << r.err;

  double recon = 0.0, endpoint = 0.0, bound = 0.0;
  std::vector<double> kls;
  std::istringstream lines(r.out);
  for (std::string line; std::getline(lines, line);) {
    if (line.rfind("recon_term,", 0) == 0) recon = std::stod(line.substr(11));
    else if (line.rfind("endpoint_kl,", 0) == 0) endpoint = std::stod(line.substr(12));
    else if (line.rfind("bound,", 0) == 0) bound = std::stod(line.substr(6));
    else if (line.rfind("kl_t,", 0) == 0) {
      const auto comma = line.find(',', 5);
      kls.push_back(std::stod(line.substr(comma + 1)));
    }
  }
  EXPECT_EQ(kls.size(), 3u);  // t = 2..4
  for (double kl : kls) EXPECT_GE(kl, 0.0);
  EXPECT_GE(endpoint, 0.0);
  double sum = recon - endpoint;
  for (double kl : kls) sum -= kl;
  EXPECT_NEAR(sum, bound, 1e-10);  // two groupings of the same terms
}

TEST(CliDiagnose, RejectsNonDiffusionCheckpoint) {
  const std::string ckpt = train_toy_checkpoint("diag_bad");
  RunResult r = run_cli("diagnose --checkpoint " + ckpt);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("diffusion"), std::string::npos) << r.err;
}

TEST(CliSample, CorruptCheckpointIsDataError) {
  const std::string ckpt = train_toy_checkpoint("corrupt");
  std::vector<char> bytes = read_bytes(ckpt);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x10);
  const std::string bad = (work_root() / "bad.ckpt").string();
  std::ofstream out(bad, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  RunResult r = run_cli("sample --checkpoint " + bad + " --n 2");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("CRC"), std::string::npos) << r.err;
}
