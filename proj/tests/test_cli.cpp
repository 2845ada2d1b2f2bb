#include <doctest.h>

#include <json.hpp>

#include <fstream>

#include "cli_pipeline.hpp"
#include "tte/survival_head.hpp"

namespace {

std::string binary() {
  const char* b = std::getenv("TTE_BIN");
  return b ? b : "";
}

cli::fs::path scratch_dir(const std::string& name) {
  return cli::fs::temp_directory_path() / ("tte_cli_test_" + name);
}

}  // namespace

TEST_CASE("end-to-end pipeline") {
  const std::string bin = binary();
  REQUIRE_MESSAGE(!bin.empty(), "TTE_BIN is not set");
  const auto dir = scratch_dir("pipeline");
  const auto res = cli::pipeline(bin, dir);
  for (const auto& [cmd, rc] : res.steps) {
    INFO(cmd);
    CHECK(rc == 0);
  }
  REQUIRE_MESSAGE(res.ok, cli::slurp(dir / "log.txt"));
  for (const char* f : {"events.jsonl", "ontology.jsonl", "truth.jsonl", "tasks.txt", "excluded.txt", "model.ckpt",
                        "model_loss.csv", "task_probe.bin", "task_finetune.bin", "adapt_finetune_loss.csv",
                        "report.json", "report.txt", "synth.config.ini", "pretrain.config.ini",
                        "evaluate.config.ini"})
    CHECK_MESSAGE(cli::fs::exists(dir / f), f);

  // held-out task never becomes a pretraining task
  const std::string tasks = cli::slurp(dir / "tasks.txt");
  CHECK(tasks.find("T3") == std::string::npos);
  CHECK(cli::slurp(dir / "excluded.txt") == "T3\n");

  const auto report = nlohmann::json::parse(cli::slurp(dir / "report.json"));
  CHECK(report["task"] == "T3");
  CHECK(report["td_c"].is_number());

  // the model against itself: zero difference, degenerate interval
  const auto cfg = dir / "run.ini";
  const auto self = "evaluate -c " + cli::quote(cfg.string()) + " --model " +
                    cli::quote((dir / "task_probe.bin").string()) + " --baseline " +
                    cli::quote((dir / "task_probe.bin").string());
  REQUIRE(cli::run(bin, self, dir / "log.txt") == 0);
  const auto same = nlohmann::json::parse(cli::slurp(dir / "report.json"));
  const auto& bs = same["td_c_bootstrap"];
  CHECK(bs["delta"] == 0.0);
  CHECK(bs["ci_lower"] == 0.0);
  CHECK(bs["ci_upper"] == 0.0);

  // scratch runs without a checkpoint
  CHECK(cli::run(bin, "adapt -c " + cli::quote(cfg.string()) + " --mode scratch --task " +
                          cli::quote((dir / "T3.json").string()),
                 dir / "log.txt") == 0);
  CHECK(cli::fs::exists(dir / "task_scratch.bin"));

  // the resolved config reproduces the run configuration
  const std::string resolved = cli::slurp(dir / "pretrain.config.ini");
  CHECK(resolved.find("inner_dim = 16") != std::string::npos);
  cli::fs::remove_all(dir);
}

TEST_CASE("exit codes") {
  const std::string bin = binary();
  REQUIRE(!bin.empty());
  const auto dir = scratch_dir("codes");
  cli::fs::remove_all(dir);
  cli::fs::create_directories(dir);
  const auto log = dir / "log.txt";
  const auto out = " -o " + cli::quote(dir.string());

  // configuration problems
  cli::write(dir / "bad.ini", "[model]\ninner_dimm = 3\n");
  CHECK(cli::run(bin, "synth -c " + cli::quote((dir / "bad.ini").string()) + out, log) == 2);
  CHECK(cli::run(bin, "synth --set model.heads=abc" + out, log) == 2);
  CHECK(cli::run(bin, "synth --set nodot" + out, log) == 2);
  CHECK(cli::run(bin, "no-such-command", log) == 2);
  CHECK(cli::run(bin, "adapt --mode sideways --task x.json" + out, log) == 2);

  // data problems
  cli::write(dir / "events.jsonl", "{\"patient_id\": \"a\", \"time\": 1}\n");
  CHECK(cli::run(bin, "select-tasks --set data.events=" + cli::quote((dir / "events.jsonl").string()) + out, log) ==
        3);
  CHECK(cli::run(bin, "select-tasks --set data.events=" + cli::quote((dir / "missing.jsonl").string()) + out, log) ==
        3);
  CHECK(cli::slurp(log).find("line 1") != std::string::npos);
  cli::fs::remove_all(dir);
}

TEST_CASE("bench reports sparse storage") {
  const std::string bin = binary();
  REQUIRE(!bin.empty());
  const auto dir = scratch_dir("bench");
  cli::fs::remove_all(dir);
  cli::fs::create_directories(dir);
  REQUIRE(cli::run(bin, "bench --rows 1024 --tasks 256 -o " + cli::quote(dir.string()), dir / "log.txt") == 0);
  const auto j = nlohmann::json::parse(cli::slurp(dir / "bench.json"));
  CHECK(j["memory"]["ratio"].get<double>() <= 0.05);
  CHECK(j["event_density"].get<double>() == doctest::Approx(0.006).epsilon(0.2));
  CHECK(j["throughput"].size() == 3);
  std::ifstream in(dir / "labels.bin", std::ios::binary);
  const auto batch = tte::SurvivalBatch::read_binary(in);
  CHECK(batch.rows() == 1024);
  CHECK(batch.tasks() == 256);
  CHECK(static_cast<double>(batch.events().size()) / (1024.0 * 256 * batch.pieces()) ==
        doctest::Approx(j["event_density"].get<double>()));
  cli::fs::remove_all(dir);
}
