#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

#include "tte/adaptation.hpp"
#include "tte/config.hpp"
#include "tte/metrics.hpp"
#include "tte/random.hpp"
#include "tte/synthgen.hpp"

namespace fs = std::filesystem;
using namespace tte;
using json = nlohmann::ordered_json;

namespace {

void log(const std::string& msg) { std::cerr << "[tte] " << msg << '\n'; }

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "config file ([section] key = value)");
  cmd->add_option("--set", c.sets, "override, e.g. --set train.learning_rate=1e-3");
  cmd->add_option("-o,--out", c.out, "output directory (overrides [data] output)");
}

RunConfig load_config(const Common& c) {
  IniFile ini = c.config.empty() ? IniFile{} : IniFile::read(c.config);
  for (const std::string& s : c.sets) ini.apply_override(s);
  if (!c.out.empty()) ini.set("data", "output", c.out);
  return RunConfig::from(ini);
}

fs::path prepare_output(const RunConfig& cfg, const std::string& stage) {
  const fs::path dir = cfg.output;
  fs::create_directories(dir);
  std::ofstream out(dir / (stage + ".config.ini"));
  cfg.resolved().write(out);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

struct Corpus {
  std::vector<EventTimeline> all, train, validation, test;
  Ontology ontology;
};

Corpus load_corpus(const RunConfig& cfg) {
  if (cfg.events.empty()) throw ConfigError("[data] events is not set");
  Corpus c;
  NormalizationReport report;
  for (const EventTimeline& tl : ingest(cfg.events)) c.all.push_back(normalize(tl, &report));
  if (report.billing_moved + report.midnight_moved + report.before_birth_moved)
    log("normalized timestamps: " + std::to_string(report.billing_moved) + " billing, " +
        std::to_string(report.midnight_moved) + " midnight, " + std::to_string(report.before_birth_moved) +
        " before birth");
  for (const EventTimeline& tl : c.all) {
    switch (assign_split(tl.patient_id, cfg.split_seed).split) {
      case Split::train: c.train.push_back(tl); break;
      case Split::validation: c.validation.push_back(tl); break;
      case Split::test: c.test.push_back(tl); break;
    }
  }
  if (!cfg.ontology.empty()) c.ontology = Ontology::read_jsonl(cfg.ontology);
  c.ontology.add_corpus_codes(c.all);
  log(std::to_string(c.all.size()) + " patients (" + std::to_string(c.train.size()) + " train, " +
      std::to_string(c.validation.size()) + " validation, " + std::to_string(c.test.size()) + " test)");
  return c;
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg) {
  const fs::path dir = prepare_output(cfg, "synth");
  const SyntheticCohort cohort = generate(default_generator_spec(cfg.synth_patients, cfg.synth_seed, cfg.hazard_ratio));
  {
    std::ofstream out(dir / "events.jsonl");
    write_jsonl(out, cohort.timelines);
  }
  {
    std::ofstream out(dir / "ontology.jsonl");
    cohort.ontology.write_jsonl(out);
  }
  {
    std::ofstream out(dir / "truth.jsonl");
    cohort.truth.write_jsonl(out);
  }
  log("wrote " + std::to_string(cohort.timelines.size()) + " patients to " + dir.string());
  return 0;
}

int cmd_select_tasks(const RunConfig& cfg) {
  const Corpus c = load_corpus(cfg);
  const fs::path dir = prepare_output(cfg, "select-tasks");
  const std::set<std::string> seeds(cfg.exclude.begin(), cfg.exclude.end());
  const std::set<std::string> excluded = expand_excluded(c.ontology, seeds);
  const CorpusStats stats(c.ontology, c.train);
  TaskSet ts;
  try {
    ts = select_tasks(c.ontology, stats, cfg.num_tasks, excluded);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  {
    std::ofstream out(dir / "tasks.txt");
    ts.write(out);
  }
  {
    std::ofstream out(dir / "excluded.txt");
    for (const std::string& e : excluded) out << e << '\n';
  }
  log("selected " + std::to_string(ts.size()) + " tasks, excluded " + std::to_string(excluded.size()) + " codes");
  return 0;
}

TaskSet load_tasks(const std::string& path, const RunConfig& cfg, const Ontology& ontology) {
  if (path.empty()) throw ConfigError("--tasks is required");
  TaskSet ts = TaskSet::read(path);
  const std::set<std::string> seeds(cfg.exclude.begin(), cfg.exclude.end());
  ts.excluded = expand_excluded(ontology, seeds);
  for (const std::string& t : ts.tasks)
    if (ts.excluded.count(t)) throw ConfigError("task " + t + " is in the excluded set");
  return ts;
}

int cmd_pretrain(const RunConfig& cfg, const std::string& tasks_path, Objective objective) {
  const Corpus c = load_corpus(cfg);
  const std::string stem = objective == Objective::tte ? "pretrain" : "pretrain-next-code";
  const fs::path dir = prepare_output(cfg, stem);
  PretrainInputs in{c.train, c.validation, &c.ontology, load_tasks(tasks_path, cfg, c.ontology)};
  PretrainResult res;
  try {
    res = objective == Objective::tte ? pretrain_tte(in, cfg.encoder, cfg.head, cfg.train)
                                      : pretrain_next_code(in, cfg.encoder, cfg.head, cfg.train);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  const std::string name = objective == Objective::tte ? "model" : "next_code";
  save_checkpoint(dir / (name + ".ckpt"), res.model, &res.state);
  std::ofstream csv(dir / (name + "_loss.csv"));
  write_loss_csv(csv, res.log);
  log("trained " + std::to_string(res.epochs_run) + " epochs; best validation loss " +
      std::to_string(res.state.best_validation_loss) + " at epoch " + std::to_string(res.state.best_epoch));
  return 0;
}

struct TaskData {
  TargetTask train, validation;
};

TaskData task_splits(const Corpus& c, const TaskDefinition& def, const RunConfig& cfg) {
  TaskData d;
  d.train = make_task_labels(c.train, def, &c.ontology);
  d.validation = make_task_labels(c.validation, def, &c.ontology);
  log("task " + def.name + ": " + std::to_string(d.train.samples.size()) + " train samples (" +
      std::to_string(d.train.events()) + " events), " + std::to_string(d.train.excluded) + " excluded, " +
      std::to_string(d.train.skipped) + " skipped");
  if (cfg.label_fraction < 1.0) {
    d.train = label_fraction(d.train, cfg.label_fraction, cfg.label_seed);
    d.validation = label_fraction(d.validation, cfg.label_fraction, splitmix64(cfg.label_seed));
    log("label fraction " + std::to_string(cfg.label_fraction) + ": " + std::to_string(d.train.samples.size()) +
        " train samples");
  }
  if (d.train.samples.empty()) throw DataError("task " + def.name + " has no training samples");
  return d;
}

int cmd_adapt(const RunConfig& cfg, const std::string& mode_name, const std::string& checkpoint,
              const std::string& task_path) {
  const AdaptMode mode = parse_adapt_mode(mode_name);
  if (task_path.empty()) throw ConfigError("--task is required");
  const TaskDefinition def = TaskDefinition::read(task_path);
  if (mode != AdaptMode::scratch && checkpoint.empty()) throw ConfigError("--checkpoint is required for " + mode_name);
  const Corpus c = load_corpus(cfg);
  const fs::path dir = prepare_output(cfg, "adapt-" + mode_name);
  const TaskData d = task_splits(c, def, cfg);

  TaskModel tm;
  if (mode == AdaptMode::scratch) {
    // architecture, vocabulary and grid of the base checkpoint when one is given
    EncoderConfig enc = cfg.encoder;
    HeadConfig head = cfg.head;
    Vocabulary vocab;
    PieceGrid grid;
    if (!checkpoint.empty()) {
      const Model base = load_checkpoint(checkpoint).model;
      enc = base.encoder_config;
      head = {base.params.head.pieces(), cfg.head.survival_dim};
      vocab = base.vocab;
      grid = base.grid;
    } else {
      vocab = Vocabulary::from_corpus(c.train, enc.vocab_size);
      std::vector<double> times;
      for (const TaskSample& s : d.train.samples)
        if (s.event) times.push_back(s.time);
      try {
        grid = fit_pieces(times, head.num_time_pieces);
      } catch (const std::invalid_argument& e) {
        throw DataError(std::string("cannot fit the piece grid: ") + e.what());
      }
    }
    const auto tr = task_examples(c.train, d.train, vocab, enc.max_sequence, grid);
    const auto va = task_examples(c.validation, d.validation, vocab, enc.max_sequence, grid);
    tm = train_scratch(enc, head, vocab, grid, def, tr, va, cfg.adapt);
  } else {
    const Model base = load_checkpoint(checkpoint).model;
    const auto tr = task_examples(c.train, d.train, base.vocab, base.encoder_config.max_sequence, base.grid);
    const auto va = task_examples(c.validation, d.validation, base.vocab, base.encoder_config.max_sequence, base.grid);
    tm = mode == AdaptMode::probe ? linear_probe(base, def, tr, va, cfg.adapt) : finetune(base, def, tr, va, cfg.adapt);
  }
  tm.base_checkpoint = checkpoint;
  const fs::path out = dir / ("task_" + mode_name + ".bin");
  save_task_model(out, tm);
  if (!tm.log.empty()) {
    std::ofstream csv(dir / ("adapt_" + mode_name + "_loss.csv"));
    write_loss_csv(csv, tm.log);
  }
  log("validation NLL " + std::to_string(tm.validation_nll) + "; wrote " + out.string());
  return 0;
}

std::vector<PiecewiseHazard> test_predictions(const TaskModel& tm, const Corpus& c, const TargetTask& task) {
  const Model& m = tm.model;
  const auto ex = task_examples(c.test, task, m.vocab, m.encoder_config.max_sequence, m.grid);
  return predict(m, ex, threads_from_env());
}

int cmd_evaluate(const RunConfig& cfg, const std::string& model_path, const std::string& baseline_path) {
  if (model_path.empty()) throw ConfigError("--model is required");
  const TaskModel tm = load_task_model(model_path);
  const Corpus c = load_corpus(cfg);
  const fs::path dir = prepare_output(cfg, "evaluate");
  const TargetTask task = make_task_labels(c.test, tm.task, &c.ontology);
  if (task.samples.empty()) throw DataError("no test samples for task " + tm.task.name);
  const std::vector<Observation> obs = task.observations();
  const auto preds = test_predictions(tm, c, task);
  MetricReport report = evaluate_predictions(tm.task.name, obs, preds, cfg.eval.nd_bins);
  if (!baseline_path.empty()) {
    const TaskModel base = load_task_model(baseline_path);
    if (base.task.to_json() != tm.task.to_json()) throw ConfigError("baseline was adapted to a different task");
    const auto bpreds = test_predictions(base, c, task);
    const Metric tdc = [](std::span<const Observation> o, std::span<const PiecewiseHazard> p) {
      return td_c_statistic(o, p).value;
    };
    report.td_c_vs_baseline = paired_bootstrap(obs, preds, bpreds, tdc, cfg.eval.bootstrap, cfg.eval.bootstrap_seed);
  }
  write_text(dir / "report.json", report.to_json() + "\n");
  write_text(dir / "report.txt", report.to_table());
  std::cout << report.to_table();
  return 0;
}

// ---------------------------------------------------------------------------

SurvivalBatch bench_batch(std::size_t rows, std::size_t tasks, std::size_t pieces, double density, std::uint64_t seed) {
  std::vector<double> starts{0.0};
  for (std::size_t p = 1; p < pieces; ++p) starts.push_back(30.0 * std::pow(2.0, static_cast<double>(p - 1)));
  const PieceGrid grid(starts);
  const double horizon = 2.0 * starts.back() + 60.0;
  const double q = std::min(1.0, density * static_cast<double>(pieces));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SurvivalBatch b(tasks, grid);
  for (std::size_t r = 0; r < rows; ++r) {
    const double censor = std::floor(horizon * unit(rng)) + 1.0;
    std::vector<std::pair<std::uint32_t, double>> ev;
    for (std::size_t k = 0; k < tasks; ++k)
      if (unit(rng) < q) ev.emplace_back(static_cast<std::uint32_t>(k), std::floor(censor * unit(rng)));
    b.add_row_sparse({0, static_cast<std::uint32_t>(r)}, censor, std::move(ev));
  }
  return b;
}

int cmd_bench(const RunConfig& cfg, std::size_t rows, std::size_t tasks, std::size_t pieces, double density,
              std::size_t dim) {
  if (rows == 0 || tasks == 0 || pieces == 0 || dim < 2) throw ConfigError("bench sizes must be positive");
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("--density must be in (0, 1]");
  const fs::path dir = prepare_output(cfg, "bench");
  const SurvivalBatch batch = bench_batch(rows, tasks, pieces, density, 7);
  const MemoryReport mem = memory_report(batch);
  const double realized = static_cast<double>(batch.events().size()) / static_cast<double>(rows * tasks * pieces);

  json j;
  j["rows"] = rows;
  j["tasks"] = tasks;
  j["pieces"] = pieces;
  j["survival_dim"] = dim;
  j["target_density"] = density;
  j["event_density"] = realized;
  j["memory"] = {{"sparse_bytes", mem.sparse_bytes}, {"dense_bytes", mem.dense_bytes}, {"ratio", mem.ratio}};
  {
    std::ofstream out(dir / "labels.bin", std::ios::binary);
    batch.write_binary(out);
    if (!out) throw DataError("cannot write " + (dir / "labels.bin").string());
  }
  j["label_file_bytes"] = fs::file_size(dir / "labels.bin");
  std::cout << "event density " << realized << "\nsparse bytes " << mem.sparse_bytes << "\ndense bytes "
            << mem.dense_bytes << "\nsparse/dense ratio " << mem.ratio << "\n";

  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 0.1);
  Matrix<float> beta(static_cast<Eigen::Index>(tasks), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < beta.size(); ++i) beta.data()[i] = static_cast<float>(normal(rng));
  json runs = json::array();
  std::cout << "batch_rows fused_rows_per_s dense_rows_per_s\n";
  for (std::size_t n : {rows / 16, rows / 4, rows}) {
    if (n == 0) continue;
    const SurvivalBatch sub = batch.slice_rows(0, n);
    Matrix<float> states(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pieces * dim));
    for (Eigen::Index i = 0; i < states.size(); ++i) states.data()[i] = static_cast<float>(normal(rng));
    for (Eigen::Index r = 0; r < states.rows(); ++r)
      for (std::size_t p = 0; p < pieces; ++p) states(r, static_cast<Eigen::Index>((p + 1) * dim - 1)) = 1.0f;
    auto time = [&](auto&& f) {
      const auto t0 = std::chrono::steady_clock::now();
      std::size_t reps = 0;
      double elapsed = 0.0;
      do {
        f();
        ++reps;
        elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } while (elapsed < 0.2);
      return static_cast<double>(n * reps) / elapsed;
    };
    const double fused = time([&] { (void)fused_nll(states, beta, sub); });
    const double dense = time([&] { (void)dense_nll(states, beta, sub); });
    runs.push_back({{"batch_rows", n}, {"fused_rows_per_s", fused}, {"dense_rows_per_s", dense}});
    std::cout << n << ' ' << fused << ' ' << dense << '\n';
  }
  j["throughput"] = runs;
  write_text(dir / "bench.json", j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"time-to-event pretraining engine"};
  app.require_subcommand(1);
  Common common;
  std::string tasks_path, mode = "probe", checkpoint, task_path, model_path, baseline_path;
  std::size_t bench_rows = 4096, bench_tasks = 256, bench_pieces = 8, bench_dim = 16;
  double bench_density = 0.006;

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort with ground truth");
  auto* select = app.add_subcommand("select-tasks", "rank codes by conditional entropy");
  auto* pre = app.add_subcommand("pretrain", "time-to-event pretraining");
  auto* pre_nc = app.add_subcommand("pretrain-next-code", "next-code pretraining baseline");
  auto* adapt = app.add_subcommand("adapt", "fit a target task from a checkpoint");
  auto* eval = app.add_subcommand("evaluate", "metric report on the test split");
  auto* bench = app.add_subcommand("bench", "label memory and fused-loss throughput");
  for (auto* c : {synth, select, pre, pre_nc, adapt, eval, bench}) add_common(c, common);
  for (auto* c : {pre, pre_nc}) c->add_option("--tasks", tasks_path, "task list from select-tasks");
  adapt->add_option("--mode", mode, "probe | finetune | scratch");
  adapt->add_option("--checkpoint", checkpoint, "pretrained checkpoint");
  adapt->add_option("--task", task_path, "task definition JSON");
  eval->add_option("--model", model_path, "task model");
  eval->add_option("--baseline", baseline_path, "second task model for a paired bootstrap");
  bench->add_option("--rows", bench_rows);
  bench->add_option("--tasks", bench_tasks);
  bench->add_option("--pieces", bench_pieces);
  bench->add_option("--density", bench_density, "fraction of (row, task, piece) cells with an event");
  bench->add_option("--survival-dim", bench_dim);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const RunConfig cfg = load_config(common);
    if (*synth) return cmd_synth(cfg);
    if (*select) return cmd_select_tasks(cfg);
    if (*pre) return cmd_pretrain(cfg, tasks_path, Objective::tte);
    if (*pre_nc) return cmd_pretrain(cfg, tasks_path, Objective::next_code);
    if (*adapt) return cmd_adapt(cfg, mode, checkpoint, task_path);
    if (*eval) return cmd_evaluate(cfg, model_path, baseline_path);
    if (*bench) return cmd_bench(cfg, bench_rows, bench_tasks, bench_pieces, bench_density, bench_dim);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
