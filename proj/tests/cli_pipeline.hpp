// Drives the command-line binary through a small end-to-end run.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace cli {

namespace fs = std::filesystem;

inline std::string quote(const std::string& s) { return "'" + s + "'"; }

/// Exit status of `bin args`, with stdout and stderr appended to `log`.
inline int run(const std::string& bin, const std::string& args, const fs::path& log) {
  const std::string cmd = quote(bin) + " " + args + " >>" + quote(log.string()) + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : 128;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

struct Settings {
  std::size_t patients = 600;
  std::size_t max_epochs = 1;
  std::size_t bootstrap = 50;
};

inline std::string config_text(const fs::path& dir, const Settings& s) {
  std::ostringstream c;
  c << "# small end-to-end run\n"
    << "[data]\nevents = " << (dir / "events.jsonl").string() << "\nontology = " << (dir / "ontology.jsonl").string()
    << "\noutput = " << dir.string() << "\n"
    << "[synth]\npatients = " << s.patients << "\nseed = 3\n"
    << "[tasks]\ncount = 8\nexclude = T3\n"
    << "[model]\nvocabulary_size = 32\ninner_dim = 16\nlayers = 1\nheads = 2\nattention_window = 16\n"
    << "max_sequence_length = 128\nnum_time_pieces = 4\nsurvival_dim = 8\n"
    << "[train]\nmax_epochs = " << s.max_epochs << "\nbatch_patients = 16\n"
    << "[adapt]\nfinetune_max_epochs = 1\nscratch_max_epochs = 1\n"
    << "[eval]\nnd_bins = 5\nbootstrap = " << s.bootstrap << "\n";
  return c.str();
}

struct PipelineResult {
  std::vector<std::pair<std::string, int>> steps;  // command, exit status
  bool ok = true;
};

/// synth -> select-tasks -> pretrain -> adapt (probe, finetune) -> evaluate in `dir`.
inline PipelineResult pipeline(const std::string& bin, const fs::path& dir, const Settings& s = {}) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "run.ini", log = dir / "log.txt";
  write(cfg, config_text(dir, s));
  write(dir / "T3.json", R"({"name": "T3", "target_codes": ["T3"]})");
  const std::string c = "-c " + quote(cfg.string()) + " ";
  const std::string d = dir.string() + "/";
  const std::vector<std::string> cmds = {
      "synth " + c,
      "select-tasks " + c,
      "pretrain " + c + "--tasks " + quote(d + "tasks.txt"),
      "adapt " + c + "--mode probe --checkpoint " + quote(d + "model.ckpt") + " --task " + quote(d + "T3.json"),
      "adapt " + c + "--mode finetune --checkpoint " + quote(d + "model.ckpt") + " --task " + quote(d + "T3.json"),
      "evaluate " + c + "--model " + quote(d + "task_finetune.bin") + " --baseline " + quote(d + "task_probe.bin"),
  };
  PipelineResult r;
  for (const std::string& cmd : cmds) {
    const int rc = run(bin, cmd, log);
    r.steps.emplace_back(cmd, rc);
    if (rc != 0) {
      r.ok = false;
      break;
    }
  }
  return r;
}

/// Every regular file under `dir` except the log, by relative path.
inline std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "log.txt")
      out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

}  // namespace cli
