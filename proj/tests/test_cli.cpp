#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "xfactor/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_binary() {
  const char* bin = std::getenv("XFLAB_BIN");
  REQUIRE(bin != nullptr);
  return bin;
}

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CliResult run_cli(const std::string& args, const fs::path& out_root) {
  static int counter = 0;
  const fs::path log = out_root / ("cli_log_" + std::to_string(counter++) + ".txt");
  const std::string cmd = "XFLAB_OUT=" + (out_root / "out").string() + " " + cli_binary() + " " +
                          args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = testutil::read_file(log);
  return r;
}

fs::path write_tiny_config(const fs::path& dir, const std::string& extra_eval = "") {
  const fs::path p = dir / "config.json";
  std::ofstream os(p);
  os << R"({
  "train": {
    "model": {"layers": 1, "width": 32, "heads": 4, "patch_size": 4,
              "pose_dim": 8, "image_size": 16, "mlp_ratio": 2},
    "data": {"sequence_length": 3, "dataset_sequences": 3},
    "batch_size": 1, "total_steps": 2, "checkpoint_every": 2,
    "log_every": 1, "seed": 5
  },
  "eval": {"n_cases": 1, "n_targets": 2, "probe_iters": 40,
           "probe_feature_dim": 16, "probe_batch_size": 8)"
     << extra_eval << R"(}
})";
  return p;
}

}  // namespace

TEST_CASE("gen-data writes manifests, previews and stage markers") {
  auto root = testutil::scratch_dir("cli_gen");
  const auto cfg = write_tiny_config(root);
  const auto r =
      run_cli("gen-data --config " + cfg.string() + " --id ds --preview 2", root);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);

  const fs::path exp = root / "out" / "ds";
  REQUIRE(fs::exists(exp / "dataset.json"));
  const auto manifests = nlohmann::json::parse(testutil::read_file(exp / "dataset.json"));
  REQUIRE(manifests.is_array());
  CHECK(manifests.size() == 3);
  CHECK(manifests.at(0).at("n_frames").get<int>() == 3);
  CHECK(manifests.at(0).at("image_size").get<int>() == 16);
  CHECK(fs::exists(exp / "previews" / "seq000_frame0.png"));
  CHECK(fs::exists(exp / "previews" / "seq001_frame0.png"));
  CHECK_FALSE(fs::exists(exp / "previews" / "seq002_frame0.png"));
  CHECK(fs::exists(exp / "manifest.json"));
  CHECK(fs::exists(exp / "stages" / "gen-data.done"));
  CHECK_FALSE(fs::exists(exp / "dataset.json.tmp"));

  // Manifests are deterministic across runs.
  auto root2 = testutil::scratch_dir("cli_gen2");
  const auto cfg2 = write_tiny_config(root2);
  const auto r2 = run_cli("gen-data --config " + cfg2.string() + " --id ds", root2);
  REQUIRE(r2.exit_code == 0);
  CHECK(testutil::read_file(exp / "dataset.json") ==
        testutil::read_file(root2 / "out" / "ds" / "dataset.json"));
}

TEST_CASE("unknown config fields are rejected by name with a usage exit") {
  auto root = testutil::scratch_dir("cli_badcfg");
  const fs::path cfg = root / "bad.json";
  {
    std::ofstream os(cfg);
    os << R"({"train": {"model": {"wdith": 32}}})";
  }
  const auto r = run_cli("gen-data --config " + cfg.string() + " --id x", root);
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("model.wdith") != std::string::npos);

  // Malformed JSON is also a usage error.
  const fs::path broken = root / "broken.json";
  {
    std::ofstream os(broken);
    os << "{ not json";
  }
  const auto r2 = run_cli("gen-data --config " + broken.string() + " --id y", root);
  CHECK(r2.exit_code == 1);
}

TEST_CASE("train runs to completion and writes checkpoints") {
  auto root = testutil::scratch_dir("cli_train");
  const auto cfg = write_tiny_config(root);
  const auto r = run_cli("train --config " + cfg.string() + " --id run1", root);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);

  const fs::path exp = root / "out" / "run1";
  CHECK(fs::exists(exp / "checkpoints" / "step_00000002.xfck"));
  CHECK(fs::exists(exp / "logs" / "train_stereo.csv"));
  CHECK(fs::exists(exp / "stages" / "train.done"));
  const auto manifest = nlohmann::json::parse(testutil::read_file(exp / "manifest.json"));
  CHECK(manifest.at("final_step").get<int>() == 2);

  // --resume with no prior checkpoints in a fresh id is a usage error.
  const auto r2 = run_cli("train --config " + cfg.string() + " --id fresh --resume", root);
  CHECK(r2.exit_code == 1);
  CHECK(r2.output.find("no checkpoint") != std::string::npos);
}

TEST_CASE("ablate applies the requested variant") {
  auto root = testutil::scratch_dir("cli_ablate");
  const auto cfg = write_tiny_config(root);
  const auto r = run_cli(
      "ablate --config " + cfg.string() + " --id bneck --variant bottleneck", root);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);

  const fs::path ck_path = root / "out" / "bneck" / "checkpoints" / "step_00000002.xfck";
  REQUIRE(fs::exists(ck_path));
  const auto ck = xfactor::load_checkpoint(ck_path.string());
  const auto meta = nlohmann::json::parse(ck.meta);
  CHECK(meta.at("config").at("model").at("variant").get<std::string>() == "bottleneck");
  CHECK(meta.at("config").at("objective").get<std::string>() == "autoencoding");
  // Bottleneck forces a 16-dimensional pose head regardless of pose_dim.
  const auto* head = ck.find("enc.pose_head.fc2.weight");
  REQUIRE(head != nullptr);
  REQUIRE(head->shape.size() == 2);
  CHECK(head->shape[1] == 16);

  const auto bad = run_cli("ablate --config " + cfg.string() + " --id z --variant nope", root);
  CHECK(bad.exit_code == 1);
}

TEST_CASE("eval gates on the harness self-test and writes reports") {
  auto root = testutil::scratch_dir("cli_eval");
  const auto cfg = write_tiny_config(root);
  REQUIRE(run_cli("train --config " + cfg.string() + " --id base", root).exit_code == 0);
  const std::string ckpt =
      (root / "out" / "base" / "checkpoints" / "step_00000002.xfck").string();

  const auto r = run_cli("eval --config " + cfg.string() + " --id ev --checkpoint " + ckpt +
                             " --suite tps",
                         root);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  const fs::path rep_path = root / "out" / "ev" / "reports" / "report.json";
  REQUIRE(fs::exists(rep_path));
  const auto rep = nlohmann::json::parse(testutil::read_file(rep_path));
  REQUIRE(rep.is_array());
  CHECK(rep.at(0).at("n_cases").get<int>() == 1);
  CHECK(rep.at(0).at("d_i_note").get<std::string>().find("SSIM") != std::string::npos);
  CHECK(fs::exists(root / "out" / "ev" / "reports" / "report.txt"));
  CHECK(fs::exists(root / "out" / "ev" / "stages" / "eval-tps.done"));

  // Missing checkpoint file is a runtime error, unknown suite a usage error.
  const auto miss = run_cli("eval --config " + cfg.string() + " --id e2 --checkpoint " +
                                (root / "nope.xfck").string(),
                            root);
  CHECK(miss.exit_code == 2);
  const auto bad = run_cli("eval --config " + cfg.string() + " --id e3 --checkpoint " + ckpt +
                               " --suite bogus",
                           root);
  CHECK(bad.exit_code == 1);
}

TEST_CASE("probe trains on frozen latents and reports pose accuracy") {
  auto root = testutil::scratch_dir("cli_probe");
  const auto cfg = write_tiny_config(root);
  REQUIRE(run_cli("train --config " + cfg.string() + " --id base", root).exit_code == 0);
  const std::string ckpt =
      (root / "out" / "base" / "checkpoints" / "step_00000002.xfck").string();

  const auto r = run_cli(
      "probe --config " + cfg.string() + " --id pp --checkpoint " + ckpt + " --mode pair", root);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  const fs::path rep_path = root / "out" / "pp" / "reports" / "probe_pair.json";
  REQUIRE(fs::exists(rep_path));
  const auto rep = nlohmann::json::parse(testutil::read_file(rep_path));
  CHECK(rep.at("mode").get<std::string>() == "pair");
  CHECK(rep.at("auc20").get<double>() >= 0.0);
  CHECK(rep.at("auc20").get<double>() <= 1.0);

  const auto bad = run_cli("probe --config " + cfg.string() + " --id p2 --checkpoint " + ckpt +
                               " --mode bogus",
                           root);
  CHECK(bad.exit_code == 1);
}

TEST_CASE("subcommand is required and ids default to a config-derived name") {
  auto root = testutil::scratch_dir("cli_misc");
  const auto none = run_cli("", root);
  CHECK(none.exit_code != 0);

  const auto cfg = write_tiny_config(root);
  const auto r = run_cli("gen-data --config " + cfg.string(), root);
  REQUIRE(r.exit_code == 0);
  bool found = false;
  for (const auto& e : fs::directory_iterator(root / "out")) {
    const std::string name = e.path().filename().string();
    if (name.rfind("gen-data-", 0) == 0 && name.size() == std::string("gen-data-").size() + 8)
      found = true;
  }
  CHECK(found);
}
