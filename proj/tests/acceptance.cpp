// One PASS/FAIL line per acceptance criterion. Tolerances are fixed below.
#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <set>

#include "checks.hpp"
#include "cli_pipeline.hpp"
#include "oracles.hpp"
#include "tte/adaptation.hpp"
#include "tte/synthgen.hpp"

using namespace tte;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome fused_vs_dense() {
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    auto inst = oracle::random_instance(rng, 8, 16, 4);
    const Matrix<double> s = inst.states, b = inst.beta;
    const auto want = oracle::dense_reference(inst.states, inst.beta, inst.grid, inst.rows);
    const auto got = fused_nll(s, b, inst.batch);
    worst = std::max({worst, oracle::rel_err(got.loss, want.loss), oracle::max_rel_err(got.grad_states, want.grad_states),
                      oracle::max_rel_err(got.grad_tasks, want.grad_tasks)});
  }
  return {worst <= 1e-6, "max relative error " + fmt(worst) + " (tol 1e-6, 100 instances)"};
}

Outcome gradient_soundness() {
  double worst = 0.0;
  std::string where;
  std::size_t classes = 0;
  for (std::uint64_t seed : {101, 102}) {
    const auto errs = checks::gradient_errors<double>(seed, 1e-5);
    classes = errs.size();
    for (const auto& [name, e] : errs)
      if (e >= worst) {
        worst = e;
        where = name;
      }
  }
  return {worst < 1e-5 && classes == 18,
          std::to_string(classes) + " parameter classes, max relative error " + fmt(worst) + " at " + where +
              " (tol 1e-5)"};
}

Outcome exponential_mle() {
  GeneratorSpec spec;
  spec.n_patients = 10000;
  spec.targets = {{"T", {PieceGrid{}, {0.01}}}};
  spec.censor_hazard = 1.0 / 500.0;
  spec.visit_rate = 0.0;
  spec.day_resolution = false;
  spec.seed = 3;
  const auto cohort = generate(spec);
  SurvivalBatch batch(1, PieceGrid{});
  double events = 0, exposure = 0;
  for (std::uint32_t i = 0; i < cohort.truth.patients.size(); ++i) {
    const auto& p = cohort.truth.patients[i];
    const auto& ev = p.targets.at("T").event_time;
    const double u = static_cast<float>(ev ? *ev : p.record_end - p.followup_start);
    std::vector<std::optional<double>> e{std::nullopt};
    if (ev) e[0] = u;
    events += ev.has_value();
    exposure += u;
    batch.add_row({i, 0}, u, e);
  }
  // single-piece state M = [0, 0, 0, 1]; only the bias coordinate of beta moves
  Matrix<double> states = Matrix<double>::Zero(10000, 4);
  states.col(3).setOnes();
  Matrix<double> beta = Matrix<double>::Zero(1, 4);
  for (int it = 0; it < 50; ++it) {
    const auto r = fused_nll(states, beta, batch);
    beta(0, 3) -= r.grad_tasks(0, 3) / (std::exp(beta(0, 3)) * exposure);
  }
  const double lam = std::exp(beta(0, 3)), mle = events / exposure;
  const double rel = std::abs(lam / mle - 1.0);
  return {rel <= 0.02, "lambda_hat " + fmt(lam, 6) + ", events/sum(U) " + fmt(mle, 6) + ", relative gap " +
                           fmt(rel) + " (tol 0.02; generating rate 0.01)"};
}

Outcome subsampling_law() {
  const double r = checks::subsampling_hazard_ratio(1000000, 0.5, 17);
  const double rel = std::abs(r / (4.0 / 3.0) - 1.0);
  return {rel <= 0.02, "hazard ratio " + fmt(r, 5) + " vs 4/3, relative gap " + fmt(rel) + " (tol 0.02, 1e6 samples)"};
}

Outcome metric_oracles() {
  const auto r = checks::metric_oracles(7, 100);
  // perfect ranking and all ties
  std::vector<Observation> obs;
  std::vector<PiecewiseHazard> good;
  std::vector<double> tie(15, 1.0);
  for (int i = 0; i < 15; ++i) {
    obs.push_back({static_cast<double>(1 + i), i % 4 != 3});
    good.push_back({PieceGrid{}, {1.0 / (1.0 + i)}});
  }
  const auto perfect = td_c_statistic(obs, good).value;
  const auto harrell_tie = harrell_c(obs, tie);
  const double tol = 1e-10;
  const bool ok = r.instances == 100 && r.definedness_mismatches == 0 && r.td_c <= tol && r.harrell <= tol &&
                  r.nd <= tol && r.ibs <= tol && perfect == 1.0 && harrell_tie == 0.5;
  return {ok, "max abs diff td-C " + fmt(r.td_c) + ", Harrell " + fmt(r.harrell) + ", ND " + fmt(r.nd) + ", IBS " +
                  fmt(r.ibs) + " (tol 1e-10, 100 instances); perfect td-C " + fmt(perfect.value_or(-1)) +
                  "; all-tie Harrell " + fmt(harrell_tie.value_or(-1))};
}

Outcome encoder_invariants() {
  const auto r = checks::encoder_invariances(5, 20);
  const bool ok = r.causality == 0.0 && r.locality == 0.0 && r.translation <= 1e-5;
  return {ok, "causality max |dR| " + fmt(r.causality) + " (exact), locality " + fmt(r.locality) +
                  " (exact), translation " + fmt(r.translation) + " (tol 1e-5), 20 sequences"};
}

Outcome sparsity(const std::string& bin) {
  if (bin.empty()) return {false, "no --bin given"};
  const auto dir = cli::fs::temp_directory_path() / "tte_acceptance_bench";
  cli::fs::remove_all(dir);
  cli::fs::create_directories(dir);
  const int rc = cli::run(bin,
                          "bench --rows 4096 --tasks 256 --pieces 8 --density 0.006 --survival-dim 16 -o " +
                              cli::quote(dir.string()),
                          dir / "log.txt");
  if (rc != 0) return {false, "bench exited with " + std::to_string(rc)};
  const auto j = nlohmann::json::parse(cli::slurp(dir / "bench.json"));
  const double ratio = j["memory"]["ratio"].get<double>(), density = j["event_density"].get<double>();
  cli::fs::remove_all(dir);
  return {ratio <= 0.05, "event density " + fmt(density) + ", sparse/dense bytes " + fmt(ratio) + " (tol 0.05)"};
}

Outcome entropy_selection() {
  bool ok = true;
  double err = 0;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto r = checks::entropy_selection(seed);
    ok &= r.exhaustive_match && r.frequency_match;
    err = std::max(err, r.max_entropy_error);
  }
  ok &= err <= 1e-12;
  return {ok, "5 random 50-code ontologies: exhaustive ranking and frequency equivalence " +
                  std::string(ok ? "hold" : "violated") + ", max entropy error " + fmt(err)};
}

// ---------------------------------------------------------------------------

struct SeedResult {
  double bayes = 0, probe = 0, finetune = 0, next_code = 0;
  double low_probe = 0, low_scratch = 0, low_bayes = 0;
  double seconds = 0;
};

double tdc(const std::vector<Observation>& obs, const std::vector<PiecewiseHazard>& preds) {
  return td_c_statistic(obs, preds).value.value_or(std::numeric_limits<double>::quiet_NaN());
}

SeedResult end_to_end_seed(std::uint64_t seed, std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticCohort cohort = generate(default_generator_spec(6000, seed, 4.0));
  std::vector<EventTimeline> train, val, test;
  std::vector<double> test_mult;  // true T3 multiplier by test timeline
  for (std::size_t i = 0; i < cohort.timelines.size(); ++i) {
    EventTimeline tl = cohort.timelines[i];
    switch (assign_split(tl.patient_id, seed).split) {
      case Split::train: train.push_back(std::move(tl)); break;
      case Split::validation: val.push_back(std::move(tl)); break;
      case Split::test:
        test.push_back(std::move(tl));
        test_mult.push_back(cohort.truth.patients[i].targets.at("T3").multiplier);
        break;
    }
  }
  const Ontology& onto = cohort.ontology;
  const TaskSet tasks = select_tasks(onto, CorpusStats(onto, train), 16, expand_excluded(onto, {"T3"}));

  EncoderConfig enc;
  enc.vocab_size = 64;
  enc.inner_dim = 32;
  enc.layers = 2;
  enc.heads = 4;
  enc.attention_window = 32;
  enc.max_sequence = 256;
  const HeadConfig head{8, 32};
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.max_epochs = 5;
  tc.seed = seed;
  PretrainInputs in;
  in.train = train;
  in.validation = val;
  in.ontology = &onto;
  in.tasks = tasks;
  const Model tte_model = pretrain_tte(in, enc, head, tc).model;
  const Model nc_model = pretrain_next_code(in, enc, head, tc).model;

  const TaskDefinition def{"T3", {"T3"}, 365.0, seed};
  const TargetTask ltr = make_task_labels(train, def, &onto), lva = make_task_labels(val, def, &onto),
                   lte = make_task_labels(test, def, &onto);
  const std::vector<Observation> obs = lte.observations();
  std::vector<double> mult;
  for (const TaskSample& s : lte.samples) mult.push_back(test_mult[s.patient]);
  const TdCResult bayes = td_c_statistic(obs, [&](std::size_t i, double) { return mult[i]; });

  AdaptConfig ac;
  ac.finetune.max_epochs = 3;
  auto examples = [&](const Model& m, const std::vector<EventTimeline>& tls, const TargetTask& t) {
    return task_examples(tls, t, m.vocab, m.encoder_config.max_sequence, m.grid);
  };
  SeedResult r;
  r.bayes = bayes.value.value_or(std::numeric_limits<double>::quiet_NaN());
  {
    const auto xtr = examples(tte_model, train, ltr), xva = examples(tte_model, val, lva),
               xte = examples(tte_model, test, lte);
    r.probe = tdc(obs, predict(linear_probe(tte_model, def, xtr, xva, ac).model, xte));
    r.finetune = tdc(obs, predict(finetune(tte_model, def, xtr, xva, ac).model, xte));

    // 5% of the adaptation labels
    const TargetTask str = label_fraction(ltr, 0.05, seed), sva = label_fraction(lva, 0.05, seed + 100);
    const auto ytr = examples(tte_model, train, str), yva = examples(tte_model, val, sva);
    r.low_probe = tdc(obs, predict(linear_probe(tte_model, def, ytr, yva, ac).model, xte));
    r.low_scratch = tdc(obs, predict(train_scratch(tte_model.encoder_config, tte_model.head_config(), tte_model.vocab,
                                                   tte_model.grid, def, ytr, yva, ac)
                                         .model,
                                     xte));
  }
  {
    const auto xtr = examples(nc_model, train, ltr), xva = examples(nc_model, val, lva),
               xte = examples(nc_model, test, lte);
    r.next_code = tdc(obs, predict(linear_probe(nc_model, def, xtr, xva, ac).model, xte));
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << "  seed " << seed << ": test " << lte.samples.size() << " subjects / " << lte.events() << " events; Bayes "
      << fmt(r.bayes) << ", TTE probe " << fmt(r.probe) << ", TTE finetune " << fmt(r.finetune) << ", next-code probe "
      << fmt(r.next_code) << "; 5% labels: probe " << fmt(r.low_probe) << " vs scratch " << fmt(r.low_scratch) << " ("
      << fmt(r.seconds, 3) << " s)" << std::endl;
  return r;
}

Outcome end_to_end(std::size_t seeds) {
  std::vector<SeedResult> rs;
  for (std::uint64_t s = 1; s <= seeds; ++s) rs.push_back(end_to_end_seed(s, std::cout));
  bool a = true;
  std::size_t wins = 0;
  double min_probe = 1e9, min_ft = 1e9, tte = 0, nc = 0;
  for (const auto& r : rs) {
    const double pr = r.probe / r.bayes, fr = r.finetune / r.bayes;
    min_probe = std::min(min_probe, pr);
    min_ft = std::min(min_ft, fr);
    a &= pr >= 0.9 && fr >= 0.9;
    wins += r.low_probe > r.low_scratch;
    tte += r.probe / static_cast<double>(rs.size());
    nc += r.next_code / static_cast<double>(rs.size());
  }
  const std::size_t need = seeds >= 5 ? 4 : seeds;
  const bool b = wins >= need, c = tte >= nc;
  std::ostringstream d;
  d << "(a) " << (a ? "pass" : "FAIL") << ": min probe/Bayes " << fmt(min_probe) << ", min finetune/Bayes "
    << fmt(min_ft) << " (need >= 0.9 every seed); (b) " << (b ? "pass" : "FAIL") << ": probe beats scratch at 5% in "
    << wins << "/" << seeds << " (need " << need << "); (c) " << (c ? "pass" : "FAIL") << ": mean TTE probe "
    << fmt(tte) << " vs next-code probe " << fmt(nc);
  return {a && b && c, d.str()};
}

Outcome determinism(const std::string& bin) {
  if (bin.empty()) return {false, "no --bin given"};
  const auto dir = cli::fs::temp_directory_path() / "tte_acceptance_determinism";
  const auto first = cli::pipeline(bin, dir);
  if (!first.ok) return {false, "first run failed: " + first.steps.back().first};
  const auto a = cli::snapshot(dir);
  // second run with a different thread count
  ::setenv("TTE_THREADS", "2", 1);
  const auto second = cli::pipeline(bin, dir);
  ::unsetenv("TTE_THREADS");
  if (!second.ok) return {false, "second run failed: " + second.steps.back().first};
  const auto b = cli::snapshot(dir);
  std::vector<std::string> diff;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second != bytes) diff.push_back(name);
  }
  if (a.size() != b.size()) diff.push_back("(file set)");
  cli::fs::remove_all(dir);
  std::string names;
  for (const auto& n : diff) names += " " + n;
  return {diff.empty(), std::to_string(a.size()) + " output files compared across two runs (threads 1 and 2), " +
                            std::to_string(diff.size()) + " differ" + (diff.empty() ? "" : ":" + names)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string bin;
  std::vector<int> only;
  std::size_t seeds = 5;
  app.add_option("--bin", bin, "command-line binary (criteria 7 and 10)");
  app.add_option("--only", only, "run only these criteria");
  app.add_option("--seeds", seeds, "seeds for criterion 9");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"fused vs dense likelihood", fused_vs_dense},
      {"gradient soundness", gradient_soundness},
      {"exponential MLE recovery", exponential_mle},
      {"censored subsampling law", subsampling_law},
      {"metric oracles", metric_oracles},
      {"encoder invariants", encoder_invariants},
      {"sparse label storage", [&] { return sparsity(bin); }},
      {"entropy task selection", entropy_selection},
      {"end-to-end direction", [&] { return end_to_end(seeds); }},
      {"determinism", [&] { return determinism(bin); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << " [" << fmt(s, 3) << " s]" << std::endl;
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
