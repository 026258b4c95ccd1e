#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = fs::temp_directory_path() / ("diffwin_cli_out_" + std::to_string(counter));
  const fs::path err = fs::temp_directory_path() / ("diffwin_cli_err_" + std::to_string(counter));
  ++counter;
  const std::string cmd = std::string(DIFFWIN_CLI_PATH) + " " + args + " > " + out.string() +
                          " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("diffwin_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Micro model config file so CLI training runs take seconds.
fs::path write_micro_config(const std::string& name) {
  const fs::path path = fs::temp_directory_path() / ("diffwin_cfg_" + name + ".json");
  std::ofstream os(path);
  os << R"({"d_model":32,"heads":2,"ffn_dim":64,"encoder_layers":1,"decoder_layers":1,)"
     << R"("vocab":8,"len_min":3,"len_max":6,"warmup_steps":100,"checkpoint_interval":200,)"
     << R"("log_interval":100,"eval_batches":2,"lr_peak":0.003,"average_last_k":2,"batch":8})";
  return path;
}

std::string strip_wall_ms(std::string text) {
  return std::regex_replace(text, std::regex("\"wall_ms\":[0-9]+"), "\"wall_ms\":0");
}

}  // namespace

TEST_CASE("train writes metrics, checkpoints and an averaged final model") {
  const fs::path dir = fresh_dir("train");
  const fs::path cfg = write_micro_config("train");
  const auto r = run_cli("train --preset copy-tiny --model \"Cr(AW,Seg)-Dec(MW)\" --steps 600"
                         " --seed 1 --config " + cfg.string() + " --out " + dir.string());
  REQUIRE(r.exit_code == 0);
  CHECK(fs::exists(dir / "metrics.ndjson"));
  CHECK(fs::exists(dir / "model.final.ckpt"));
  CHECK(fs::exists(dir / "ckpt-600.ckpt"));

  // stdout is one JSON object of final metrics
  const json metrics = json::parse(r.out);
  CHECK(metrics.contains("token_accuracy"));
  CHECK(metrics["token_accuracy"].get<double>() >= 0.8);
}

TEST_CASE("an invalid preset fails with exit 1 and lists the valid ones") {
  const auto r = run_cli("train --preset nope-tiny");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("copy-tiny") != std::string::npos);
  CHECK(r.err.find("sva-tiny") != std::string::npos);
  CHECK(r.err.find("charlm-tiny") != std::string::npos);
}

TEST_CASE("unknown config file keys are rejected, not ignored") {
  const fs::path cfg = fs::temp_directory_path() / "diffwin_cfg_badkey.json";
  std::ofstream(cfg) << R"({"d_model":32,"banana":3})";
  const auto r = run_cli("train --preset copy-tiny --config " + cfg.string());
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("banana") != std::string::npos);
}

TEST_CASE("an invalid attention policy string fails fast with exit 1") {
  const auto r = run_cli("train --preset copy-tiny --model \"Dec(QQ)\" --steps 5");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("QQ") != std::string::npos);
}

TEST_CASE("reruns with the same seed produce identical logs and metrics") {
  const fs::path cfg = write_micro_config("det");
  auto run_once = [&](const std::string& tag) {
    const fs::path dir = fresh_dir(tag);
    const auto r = run_cli("train --preset copy-tiny --model \"Dec(MW)\" --steps 60 --seed 9"
                           " --config " + cfg.string() + " --out " + dir.string());
    REQUIRE(r.exit_code == 0);
    return std::pair{r.out, strip_wall_ms(slurp(dir / "metrics.ndjson"))};
  };
  const auto a = run_once("det_a");
  const auto b = run_once("det_b");
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("eval prints metrics for a trained checkpoint and is side-effect free") {
  const fs::path dir = fresh_dir("eval");
  const fs::path cfg = write_micro_config("eval");
  REQUIRE(run_cli("train --preset copy-tiny --model \"Dec(MW)\" --steps 60 --seed 2 --config " +
                  cfg.string() + " --out " + dir.string())
              .exit_code == 0);

  std::vector<fs::path> before;
  for (const auto& e : fs::directory_iterator(dir)) before.push_back(e.path());

  const auto r = run_cli("eval --model-path " + (dir / "model.final.ckpt").string() +
                         " --task copy --batches 2");
  REQUIRE(r.exit_code == 0);
  const json metrics = json::parse(r.out);
  CHECK(metrics.contains("token_accuracy"));

  std::vector<fs::path> after;
  for (const auto& e : fs::directory_iterator(dir)) after.push_back(e.path());
  CHECK(before == after);
}

TEST_CASE("a corrupted checkpoint header exits 2 with no partial stdout") {
  const fs::path bad = fs::temp_directory_path() / "diffwin_bad.ckpt";
  std::ofstream(bad) << "{\"version\":\"diffwin-ckpt-v0\"}\n";
  const auto r = run_cli("eval --model-path " + bad.string() + " --task copy");
  CHECK(r.exit_code == 2);
  CHECK(r.out.empty());
}

TEST_CASE("gradcheck ops passes and reports the mask constructions under attention") {
  const auto r = run_cli("gradcheck ops");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("\"unit\":\"matmul\"") != std::string::npos);

  const auto r2 = run_cli("gradcheck attention");
  CHECK(r2.exit_code == 0);
  CHECK(r2.out.find("soft_mask") != std::string::npos);
  CHECK(r2.out.find("segment_soft_mask") != std::string::npos);
}

TEST_CASE("the deliberately broken unit makes gradcheck exit 4 and name it") {
  const auto r = run_cli("gradcheck ops --self-test-negative");
  CHECK(r.exit_code == 4);
  CHECK(r.err.find("negative_control_sign_flip") != std::string::npos);
}

TEST_CASE("maskdump writes the three CSV panels for a windowed site") {
  const fs::path dir = fresh_dir("maskdump");
  const fs::path cfg = write_micro_config("maskdump");
  REQUIRE(run_cli("train --preset copy-tiny --model \"Cr(AW,Seg)-Dec(MW)\" --steps 60 --seed 3"
                  " --config " + cfg.string() + " --out " + dir.string())
              .exit_code == 0);
  const std::string ckpt = (dir / "model.final.ckpt").string();

  const fs::path dump = fresh_dir("maskdump_out");
  const auto r = run_cli("maskdump --model-path " + ckpt +
                         " --input 3,4,5,6 --layer 1 --head 1 --site decoder_self --out " +
                         dump.string());
  REQUIRE(r.exit_code == 0);
  for (const char* name : {"mask.csv", "attention_scores.csv", "attention_weights.csv"}) {
    CHECK(fs::exists(dump / name));
    const std::string text = slurp(dump / name);
    CHECK(text.find("query_index,pos_1") == 0);
    // 5 decoder rows: bos + 4 target tokens
    CHECK(std::count(text.begin(), text.end(), '\n') == 6);
  }

  // mask values within [0, 2]
  std::ifstream mask(dump / "mask.csv");
  std::string line;
  std::getline(mask, line);  // header
  while (std::getline(mask, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // query index
    while (std::getline(ss, cell, ',')) {
      const double v = std::stod(cell);
      CHECK(v >= 0.0);
      CHECK(v <= 2.0);
    }
  }

  // a global site has no mask to dump
  const auto r2 = run_cli("maskdump --model-path " + ckpt +
                          " --input 3,4,5,6 --layer 1 --head 1 --site encoder_self --out " +
                          dump.string());
  CHECK(r2.exit_code == 1);
  CHECK(r2.err.find("global") != std::string::npos);
}

TEST_CASE("make-corpus writes at least the requested bytes") {
  const fs::path out = fs::temp_directory_path() / "diffwin_corpus.txt";
  const auto r = run_cli("make-corpus --out " + out.string() + " --min-bytes 65536 --seed 4");
  REQUIRE(r.exit_code == 0);
  CHECK(fs::file_size(out) >= 65536);
  fs::remove(out);
}
