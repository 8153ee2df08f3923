#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sys/wait.h>
#include <sstream>

#include "cofusion/cli.hpp"
#include "oracles.hpp"

using namespace cofusion;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("cofusion_cli_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string& name) const { return (dir / name).string(); }

  int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cofusion");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out.str("");
    err.str("");
    return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  }

  // 16x16x4 ground truth, 8x8x4 LRHSI, 16x16x3 HRMSI
  void make_fixture() {
    ASSERT_EQ(cli({"synth", "--h", "16", "--w", "16", "--bands", "4", "--seed", "3", "--out", p("gt.hsc")}), 0);
    ASSERT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--scale", "2", "--out-lr", p("lr.hsc"), "--out-ms",
                   p("ms.hsc")}),
              0);
  }

  std::vector<std::string> train_args(const std::string& out_name, std::size_t steps = 3) {
    return {"train",        "--lr",  p("lr.hsc"), "--ms",    p("ms.hsc"), "--gt",     p("gt.hsc"),
            "--steps",      std::to_string(steps), "--hidden-dim", "8", "--topk", "2", "--out", p(out_name)};
  }

  fs::path dir;
  std::ostringstream out, err;
};

std::string slurp(const fs::path& path) { return detail::read_file(path); }

}  // namespace

TEST(Sha256, MatchesKnownDigest) {
  EXPECT_EQ(cli::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(cli::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(RgbBands, ParsesAndRejects) {
  EXPECT_EQ(cli::parse_rgb_bands("auto", 8), (std::array<std::size_t, 3>{7, 4, 0}));
  EXPECT_EQ(cli::parse_rgb_bands("1,2,3", 8), (std::array<std::size_t, 3>{1, 2, 3}));
  EXPECT_THROW(cli::parse_rgb_bands("1,2", 8), cli::UsageError);
  EXPECT_THROW(cli::parse_rgb_bands("1,2,3,4", 8), cli::UsageError);
  EXPECT_THROW(cli::parse_rgb_bands("1,x,3", 8), cli::UsageError);
  EXPECT_THROW(cli::parse_rgb_bands("1,2,8", 8), cli::UsageError);
}

TEST(Ppm, HeaderAndClipping) {
  HyperCube c(1, 2, 3);
  c.at(0, 0, 0) = -1.0;
  c.at(0, 0, 1) = 2.0;
  c.at(1, 0, 1) = 0.5;
  const std::string ppm = cli::encode_ppm(c, {0, 1, 2});
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 6);
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  const auto* px = reinterpret_cast<const unsigned char*>(ppm.data() + header.size());
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[3], 255);
  EXPECT_EQ(px[4], 128);
}

TEST_F(CliTest, SynthIsDeterministicAndWritesManifest) {
  ASSERT_EQ(cli({"synth", "--h", "16", "--w", "12", "--bands", "5", "--seed", "9", "--out", p("a.hsc")}), 0);
  ASSERT_EQ(cli({"synth", "--h", "16", "--w", "12", "--bands", "5", "--seed", "9", "--out", p("b.hsc")}), 0);
  EXPECT_EQ(slurp(p("a.hsc")), slurp(p("b.hsc")));
  const HyperCube c = read_hsc(p("a.hsc"));
  EXPECT_EQ(c.height, 16u);
  EXPECT_EQ(c.width, 12u);
  EXPECT_EQ(c.bands, 5u);

  const auto m = nlohmann::json::parse(slurp(p("a.hsc.manifest.json")));
  EXPECT_EQ(m["subcommand"], "synth");
  EXPECT_EQ(m["seed"], 9);
  EXPECT_EQ(m["tool_version"], std::string(cli::kToolVersion));
  EXPECT_EQ(m["outputs"][0], p("a.hsc"));
  EXPECT_TRUE(m["inputs"].empty());
}

TEST_F(CliTest, SynthRejectsSingleBand) {
  EXPECT_EQ(cli({"synth", "--bands", "1", "--out", p("a.hsc")}), 1);
  EXPECT_NE(err.str().find("--bands"), std::string::npos);
  EXPECT_FALSE(fs::exists(p("a.hsc")));
}

TEST_F(CliTest, UnknownKindIsUsageError) {
  EXPECT_EQ(cli({"synth", "--kind", "stripes", "--out", p("a.hsc")}), 1);
}

TEST_F(CliTest, SimulateShapesAndHashes) {
  ASSERT_EQ(cli({"synth", "--h", "64", "--w", "64", "--bands", "8", "--out", p("gt.hsc")}), 0);
  ASSERT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--scale", "4", "--out-lr", p("lr.hsc"), "--out-ms",
                 p("ms.hsc")}),
            0);
  const HyperCube lr = read_hsc(p("lr.hsc")), ms = read_hsc(p("ms.hsc"));
  EXPECT_EQ(lr.dims(), "16x16x8");
  EXPECT_EQ(ms.dims(), "64x64x3");

  const auto m = nlohmann::json::parse(slurp(p("lr.hsc.manifest.json")));
  EXPECT_EQ(m["subcommand"], "simulate");
  EXPECT_EQ(m["inputs"][0]["sha256"], cli::sha256_hex(slurp(p("gt.hsc"))));
  EXPECT_EQ(m["config"]["scale"], 4);
  EXPECT_DOUBLE_EQ(m["config"]["blur_sigma"].get<double>(), 2.0);
  EXPECT_EQ(m["outputs"].size(), 2u);

  ASSERT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--scale", "8", "--out-lr", p("lr8.hsc"), "--out-ms",
                 p("ms8.hsc")}),
            0);
  EXPECT_EQ(read_hsc(p("lr8.hsc")).dims(), "8x8x8");
}

TEST_F(CliTest, SimulateMatchesLibrary) {
  ASSERT_EQ(cli({"synth", "--h", "32", "--w", "32", "--bands", "6", "--out", p("gt.hsc")}), 0);
  ASSERT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--scale", "2", "--sigma", "1.3", "--msi-bands", "2",
                 "--out-lr", p("lr.hsc"), "--out-ms", p("ms.hsc")}),
            0);
  const HyperCube gt = read_hsc(p("gt.hsc"));
  DegradationSpec spec = DegradationSpec::for_scale(2);
  spec.blur_sigma = 1.3;
  spec.kernel_size = min_kernel_size(1.3);
  const HyperCube lr = read_hsc(p("lr.hsc")), want = wald_degrade(gt, spec);
  ASSERT_TRUE(lr.same_shape(want));
  for (std::size_t i = 0; i < lr.size(); ++i) EXPECT_EQ(lr.data[i], static_cast<double>(static_cast<float>(want.data[i])));
  EXPECT_EQ(read_hsc(p("ms.hsc")).bands, 2u);
}

TEST_F(CliTest, SimulateRejectsScaleThree) {
  ASSERT_EQ(cli({"synth", "--h", "24", "--w", "24", "--out", p("gt.hsc")}), 0);
  EXPECT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--scale", "3", "--out-lr", p("lr.hsc"), "--out-ms",
                 p("ms.hsc")}),
            1);
  const std::string msg = err.str();
  EXPECT_NE(msg.find("2, 4, 8"), std::string::npos) << msg;
}

TEST_F(CliTest, SimulateIndivisibleIsDataError) {
  ASSERT_EQ(cli({"synth", "--h", "18", "--w", "16", "--out", p("gt.hsc")}), 0);
  EXPECT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--scale", "4", "--out-lr", p("lr.hsc"), "--out-ms",
                 p("ms.hsc")}),
            2);
}

TEST_F(CliTest, SimulateUnreadableSrf) {
  ASSERT_EQ(cli({"synth", "--h", "16", "--w", "16", "--out", p("gt.hsc")}), 0);
  detail::write_file(p("srf.json"), "{not json");
  EXPECT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--srf", p("srf.json"), "--out-lr", p("lr.hsc"), "--out-ms",
                 p("ms.hsc")}),
            2);
  EXPECT_EQ(cli({"simulate", "--input", p("gt.hsc"), "--srf", p("missing.json"), "--out-lr", p("lr.hsc"),
                 "--out-ms", p("ms.hsc")}),
            2);
}

TEST_F(CliTest, SimulateMissingInput) {
  EXPECT_EQ(cli({"simulate", "--input", p("none.hsc"), "--out-lr", p("lr.hsc"), "--out-ms", p("ms.hsc")}), 2);
}

TEST_F(CliTest, TrainZeroStepsSavesInitialParams) {
  make_fixture();
  ASSERT_EQ(cli(train_args("m.cfm", 0)), 0) << err.str();
  const LoadedModel m = load_model(p("m.cfm"));
  EXPECT_EQ(m.config.hsi_bands, 4u);
  EXPECT_EQ(m.config.msi_bands, 3u);
  EXPECT_EQ(m.config.scale_factor, 2u);
  EXPECT_EQ(m.config.hidden_dim, 8u);
  const ModelParams init = init_params(m.config, 42);
  ASSERT_EQ(m.params.size(), init.size());
  for (const auto& [path, t] : init) EXPECT_EQ(m.params.at(path).values(), t.values()) << path;
}

TEST_F(CliTest, TrainIsByteDeterministicAndLogs) {
  make_fixture();
  auto a = train_args("a.cfm");
  a.insert(a.end(), {"--log", p("a.ndjson")});
  ASSERT_EQ(cli(a), 0) << err.str();
  ASSERT_EQ(cli(train_args("b.cfm")), 0);
  EXPECT_EQ(slurp(p("a.cfm")), slurp(p("b.cfm")));

  std::ifstream log(p("a.ndjson"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"], n);
    EXPECT_TRUE(j.contains("total"));
    ++n;
  }
  EXPECT_EQ(n, 3u);

  const auto m = nlohmann::json::parse(slurp(p("a.cfm.manifest.json")));
  EXPECT_EQ(m["inputs"].size(), 3u);
  EXPECT_EQ(m["config"]["steps"], 3);
  EXPECT_EQ(m["outputs"][1], p("a.ndjson"));
}

TEST_F(CliTest, TrainSeedChangesModel) {
  make_fixture();
  ASSERT_EQ(cli(train_args("a.cfm", 0)), 0);
  auto b = train_args("b.cfm", 0);
  b.insert(b.end(), {"--seed", "7"});
  ASSERT_EQ(cli(b), 0);
  EXPECT_NE(slurp(p("a.cfm")), slurp(p("b.cfm")));
}

TEST_F(CliTest, TrainShapeMismatchNamesDims) {
  make_fixture();
  ASSERT_EQ(cli({"synth", "--h", "24", "--w", "24", "--bands", "4", "--out", p("gt24.hsc")}), 0);
  auto a = train_args("m.cfm");
  a[6] = p("gt24.hsc");
  EXPECT_EQ(cli(a), 2);
  EXPECT_NE(err.str().find("24x24x4"), std::string::npos) << err.str();
  EXPECT_FALSE(fs::exists(p("m.cfm")));
}

TEST_F(CliTest, TrainConfigErrors) {
  make_fixture();
  auto a = train_args("m.cfm");
  a.insert(a.end(), {"--topk", "9"});
  EXPECT_EQ(cli(a), 1);
  detail::write_file(p("bad.json"), "[1,2");
  auto b = train_args("m.cfm");
  b.insert(b.end(), {"--config", p("bad.json")});
  EXPECT_EQ(cli(b), 1);
}

TEST_F(CliTest, TrainConfigFileIsApplied) {
  make_fixture();
  detail::write_file(p("cfg.json"), R"({"hidden_dim": 12, "scm_topk": 3, "ablation": {"disable_sscfm": true}})");
  auto a = train_args("m.cfm", 0);
  a.erase(a.begin() + 9, a.begin() + 13);  // drop --hidden-dim/--topk overrides
  a.insert(a.end(), {"--config", p("cfg.json")});
  ASSERT_EQ(cli(a), 0) << err.str();
  const LoadedModel m = load_model(p("m.cfm"));
  EXPECT_EQ(m.config.hidden_dim, 12u);
  EXPECT_EQ(m.config.scm_topk, 3u);
  EXPECT_TRUE(m.config.ablation.disable_sscfm);
}

TEST_F(CliTest, TrainDivergenceExitsNumerical) {
  make_fixture();
  auto a = train_args("m.cfm", 40);
  a.insert(a.end(), {"--learning-rate", "1e200", "--schedule", "constant"});
  const int code = cli(a);
  EXPECT_EQ(code, 3) << err.str();
  EXPECT_NE(err.str().find("step"), std::string::npos) << err.str();
}

TEST_F(CliTest, InferZeroModelIsBilinearUpsample) {
  make_fixture();
  const HyperCube lr = read_hsc(p("lr.hsc")), ms = read_hsc(p("ms.hsc"));
  ModelConfig config;
  config.hidden_dim = 8;
  config.scm_topk = 2;
  config.hsi_bands = 4;
  config.msi_bands = 3;
  config.scale_factor = 2;
  save_model(p("zero.cfm"), config, zero_params(config));
  ASSERT_EQ(cli({"infer", "--model", p("zero.cfm"), "--lr", p("lr.hsc"), "--ms", p("ms.hsc"), "--out",
                 p("fused.hsc"), "--dump-rgb", p("fused.ppm")}),
            0)
      << err.str();
  const HyperCube fused = read_hsc(p("fused.hsc"));
  ASSERT_EQ(fused.dims(), "16x16x4");

  oracle::Img in{lr.bands, lr.height, lr.width, lr.data};
  const oracle::Img up = oracle::bilinear(in, 16, 16);
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const double want = static_cast<float>(std::clamp(up.v[i], 0.0, 1.0));
    EXPECT_EQ(fused.data[i], want) << i;
  }
  const std::string ppm = slurp(p("fused.ppm"));
  EXPECT_EQ(ppm.substr(0, 13), "P6\n16 16\n255\n");
  EXPECT_EQ(ppm.size(), 13u + 16 * 16 * 3);
}

TEST_F(CliTest, InferIsBitReproducible) {
  make_fixture();
  ASSERT_EQ(cli(train_args("m.cfm", 2)), 0);
  const std::vector<std::string> args{"infer", "--model", p("m.cfm"), "--lr", p("lr.hsc"), "--ms", p("ms.hsc"),
                                      "--out"};
  auto a = args, b = args;
  a.push_back(p("a.hsc"));
  b.push_back(p("b.hsc"));
  ASSERT_EQ(cli(a), 0);
  ASSERT_EQ(cli(b), 0);
  EXPECT_EQ(slurp(p("a.hsc")), slurp(p("b.hsc")));
  for (double v : read_hsc(p("a.hsc")).data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(CliTest, InferBandMismatch) {
  make_fixture();
  ASSERT_EQ(cli(train_args("m.cfm", 0)), 0);
  EXPECT_EQ(cli({"infer", "--model", p("m.cfm"), "--lr", p("ms.hsc"), "--ms", p("ms.hsc"), "--out", p("f.hsc")}), 2);
  EXPECT_NE(err.str().find("bands"), std::string::npos);
}

TEST_F(CliTest, InferCorruptModel) {
  make_fixture();
  detail::write_file(p("bad.cfm"), "CFM1garbage");
  EXPECT_EQ(cli({"infer", "--model", p("bad.cfm"), "--lr", p("lr.hsc"), "--ms", p("ms.hsc"), "--out", p("f.hsc")}),
            2);
}

TEST_F(CliTest, EvalIdenticalCubes) {
  make_fixture();
  ASSERT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--ref", p("gt.hsc"), "--out", p("m.json")}), 0) << err.str();
  const std::string printed = out.str();
  EXPECT_EQ(printed, slurp(p("m.json")));
  EXPECT_EQ(printed,
            "{\"mode\":\"full-reference\",\"psnr\":\"inf\",\"ssim\":1.000000,\"sam\":0.000000,\"ergas\":0.000000}\n");
}

TEST_F(CliTest, EvalMatchesLibraryReport) {
  make_fixture();
  ASSERT_EQ(cli({"synth", "--h", "16", "--w", "16", "--bands", "4", "--seed", "4", "--out", p("other.hsc")}), 0);
  ASSERT_EQ(cli({"eval", "--fused", p("other.hsc"), "--ref", p("gt.hsc"), "--lr", p("lr.hsc"), "--out",
                 p("m.json")}),
            0);
  const std::string want =
      to_json(full_reference_report(read_hsc(p("other.hsc")), read_hsc(p("gt.hsc")), 0.5)) + "\n";
  EXPECT_EQ(slurp(p("m.json")), want);

  ASSERT_EQ(cli({"eval", "--fused", p("other.hsc"), "--ref", p("gt.hsc"), "--scale", "8", "--out", p("m8.json")}),
            0);
  EXPECT_EQ(slurp(p("m8.json")),
            to_json(full_reference_report(read_hsc(p("other.hsc")), read_hsc(p("gt.hsc")), 0.125)) + "\n");

  const auto m = nlohmann::json::parse(slurp(p("m.json.manifest.json")));
  EXPECT_EQ(m["config"]["mode"], "full-reference");
  EXPECT_EQ(m["inputs"].size(), 3u);
}

TEST_F(CliTest, EvalNoReferenceConsistentPair) {
  make_fixture();
  // an LRHSI that is exactly the degraded fused cube leaves no spectral distortion
  const HyperCube gt = read_hsc(p("gt.hsc"));
  write_hsc(p("lr_exact.hsc"), wald_degrade(gt, DegradationSpec::for_scale(2)));
  ASSERT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--no-ref", "--lr", p("lr_exact.hsc"), "--ms", p("ms.hsc"),
                 "--out", p("m.json")}),
            0)
      << err.str();
  const auto j = nlohmann::json::parse(out.str());
  EXPECT_EQ(j["mode"], "no-reference");
  EXPECT_NEAR(j["d_lambda"].get<double>(), 0.0, 1e-5);
  const double dl = j["d_lambda"], ds = j["d_s"], q = j["qnr"];
  EXPECT_NEAR(q, (1 - dl) * (1 - ds), 2e-6);
  EXPECT_FALSE(j.contains("psnr"));
}

TEST_F(CliTest, EvalFlagCombinations) {
  make_fixture();
  EXPECT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--out", p("m.json")}), 1);
  EXPECT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--ref", p("gt.hsc"), "--no-ref", "--out", p("m.json")}), 1);
  EXPECT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--no-ref", "--lr", p("lr.hsc"), "--out", p("m.json")}), 1);
  EXPECT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--ref", p("lr.hsc"), "--out", p("m.json")}), 2);
}

TEST_F(CliTest, EvalDumpRgb) {
  make_fixture();
  ASSERT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--ref", p("gt.hsc"), "--out", p("m.json"), "--dump-rgb",
                 p("x.ppm"), "--rgb-bands", "0,1,2"}),
            0);
  const HyperCube gt = read_hsc(p("gt.hsc"));
  EXPECT_EQ(slurp(p("x.ppm")), cli::encode_ppm(gt, {0, 1, 2}));
  EXPECT_EQ(cli({"eval", "--fused", p("gt.hsc"), "--ref", p("gt.hsc"), "--out", p("m.json"), "--dump-rgb",
                 p("y.ppm"), "--rgb-bands", "0,1,4"}),
            1);
}

TEST_F(CliTest, GradcheckPassesWithOneEntryPerOp) {
  ASSERT_EQ(cli({"gradcheck", "--out", p("g.json")}), 0) << err.str();
  const auto j = nlohmann::json::parse(out.str());
  EXPECT_EQ(j, nlohmann::json::parse(slurp(p("g.json"))));
  ASSERT_TRUE(j.contains("ops"));
  EXPECT_TRUE(j["passed"].get<bool>());
  std::set<std::string> names;
  for (const auto& e : j["ops"]) {
    EXPECT_TRUE(names.insert(e["op"].get<std::string>()).second) << e["op"];
    EXPECT_TRUE(e["passed"].get<bool>()) << e["op"];
  }
  for (const char* op : {"conv2d_depthwise", "scm_traverse", "haar_dwt2", "ssim", "cofusion_end_to_end"})
    EXPECT_TRUE(names.count(op)) << op;
  EXPECT_TRUE(fs::exists(p("g.json.manifest.json")));
}

TEST_F(CliTest, GradcheckRejectsLargeSize) { EXPECT_EQ(cli({"gradcheck", "--size", "large"}), 1); }

TEST_F(CliTest, NoSubcommandIsUsageError) {
  EXPECT_EQ(cli({}), 1);
  EXPECT_EQ(cli({"frobnicate"}), 1);
}

TEST_F(CliTest, VersionFlag) {
  EXPECT_EQ(cli({"--version"}), 0);
  EXPECT_NE(out.str().find(std::string(cli::kToolVersion)), std::string::npos);
}

TEST(Binary, ExitCodes) {
  const std::string tool = COFUSION_TOOL_PATH;
  auto status = [&](const std::string& args) {
    const int raw = std::system((tool + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  EXPECT_EQ(status(""), 1);
  EXPECT_EQ(status("--version"), 0);
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status("synth --bands 1 --out /tmp/cofusion_never.hsc"), 1);
  EXPECT_EQ(status("eval --fused /nonexistent/x.hsc --ref /nonexistent/y.hsc"), 2);
}
