#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "rotor_tomo/trajectory_io.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "rotor_tomo_cli_test";

int cli(const std::string& args) {
  const std::string cmd = std::string(ROTOR_TOMO_CLI) + " " + args + " > " + (kDir / "last.log").string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string last_log() {
  std::ifstream in(kDir / "last.log");
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
  }
  std::string out() const { return "--out " + kDir.string(); }
};

}  // namespace

TEST_F(Cli, PresetRoundTripExitCodes) {
  ASSERT_EQ(cli("presets"), 0);
  EXPECT_NE(last_log().find("fig5"), std::string::npos);
  ASSERT_EQ(cli("simulate --preset fig5 " + out()), 0) << last_log();
  EXPECT_TRUE(fs::exists(kDir / "fig5_cos2_theta.csv"));
  EXPECT_TRUE(fs::exists(kDir / "fig5_cos2_theta.json"));
  ASSERT_EQ(cli("reconstruct --preset fig5 --threads 1 " + out() + " --truth " + (kDir / "fig5_truth.json").string()), 0) << last_log();
  const auto bundle = rotor_tomo::read_json(kDir / "fig5_result.json");
  EXPECT_EQ(bundle.at("status"), "converged");
  EXPECT_LT(bundle.at("metrics").at("inertia").at("relative_error").get<double>(), 5e-3);
  EXPECT_TRUE(fs::exists(kDir / "fig5_trace.jsonl"));
  EXPECT_TRUE(fs::exists(kDir / "fig5_model_cos2_theta.csv"));

  // worker count does not change results
  fs::create_directories(kDir / "t3");
  fs::copy_file(kDir / "fig5_cos2_theta.csv", kDir / "t3" / "fig5_cos2_theta.csv");
  ASSERT_EQ(cli("reconstruct --preset fig5 --threads 3 --out " + (kDir / "t3").string() + " --truth " + (kDir / "fig5_truth.json").string()), 0);
  EXPECT_EQ(rotor_tomo::read_json(kDir / "t3" / "fig5_result.json").dump(), bundle.dump());

  EXPECT_EQ(cli("gradcheck --preset fig5 " + out()), 0) << last_log();
  EXPECT_NE(last_log().find("n/a"), std::string::npos);
  EXPECT_EQ(cli("gradcheck --preset fig5 --corrupt-gradient " + out()), 1) << last_log();

  // iteration cap
  ASSERT_EQ(cli("presets --name fig5 " + out()), 0);
  auto doc = rotor_tomo::read_json(kDir / "fig5_reconstruct.json");
  doc["optimizer"]["max_iterations"] = 3;
  rotor_tomo::write_json(kDir / "capped.json", doc);
  EXPECT_EQ(cli("reconstruct --config " + (kDir / "capped.json").string() + " " + out()), 2) << last_log();
}

TEST_F(Cli, InputErrorsExitWithThree) {
  EXPECT_EQ(cli("simulate --preset nosuch " + out()), 3);
  EXPECT_EQ(cli("simulate --config " + (kDir / "missing.json").string() + " " + out()), 3);
  std::ofstream(kDir / "broken.json") << "{ not json";
  EXPECT_EQ(cli("simulate --config " + (kDir / "broken.json").string() + " " + out()), 3);
  EXPECT_NE(last_log().find("invalid JSON"), std::string::npos);
  ASSERT_EQ(cli("presets --name fig5 " + out()), 0);
  // reconstruct configs carry unknowns, which simulate refuses
  EXPECT_EQ(cli("simulate --config " + (kDir / "fig5_reconstruct.json").string() + " " + out()), 3);
  EXPECT_NE(last_log().find("unknown"), std::string::npos);
  EXPECT_EQ(cli("gradcheck --preset fig5 --block Q " + out()), 3);
  EXPECT_EQ(cli("frobnicate"), 3);
}
