#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tte/adaptation.hpp"
#include "tte/synthgen.hpp"

using namespace tte;

namespace {

EventTimeline timeline(const std::string& id, std::vector<Event> ev) {
  EventTimeline tl;
  tl.patient_id = id;
  tl.events = std::move(ev);
  return tl;
}

TaskDefinition def(std::string target) {
  TaskDefinition d;
  d.name = target;
  d.target_codes = {std::move(target)};
  return d;
}

struct Fixture {
  SyntheticCohort cohort;
  Model base;
  TargetTask train, val;
  std::vector<PatientExample> train_ex, val_ex;

  Fixture() : cohort(generate(default_generator_spec(360, 3, 4.0))) {
    const std::span<const EventTimeline> all(cohort.timelines);
    PretrainInputs in;
    in.train = all.subspan(0, 240);
    in.validation = all.subspan(240, 60);
    in.ontology = &cohort.ontology;
    in.tasks.tasks = {"T1", "T2", "N0", "N1", "R1", "R2"};
    in.tasks.entropies.assign(6, 0.0);
    EncoderConfig enc;
    enc.vocab_size = 32;
    enc.inner_dim = 16;
    enc.layers = 1;
    enc.heads = 2;
    enc.attention_window = 16;
    enc.max_sequence = 128;
    TrainConfig tc;
    tc.max_epochs = 1;
    tc.learning_rate = 3e-3;
    base = pretrain_tte(in, enc, {4, 8}, tc).model;
    const TargetTask task = make_task_labels(all.subspan(0, 300), def("T3"), &cohort.ontology);
    for (const TaskSample& s : task.samples) (s.patient < 240 ? train : val).samples.push_back(s);
    train_ex = task_examples(all, train, base.vocab, base.encoder_config.max_sequence, base.grid);
    val_ex = task_examples(all, val, base.vocab, base.encoder_config.max_sequence, base.grid);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("task labels: worked examples") {
  // only visit end 400 qualifies; target 30 days later
  std::vector<EventTimeline> tls{
      timeline("a", {{0, "X", EventKind::diagnosis},
                     {200, "V", EventKind::visit_end},
                     {400, "V", EventKind::visit_end},
                     {430, "T", EventKind::diagnosis},
                     {900, "X", EventKind::diagnosis}}),
      // target before the only prediction time
      timeline("b", {{0, "X", EventKind::diagnosis}, {100, "T", EventKind::diagnosis},
                     {500, "V", EventKind::visit_end}, {600, "X", EventKind::other}}),
      // no visit end after a year
      timeline("c", {{0, "X", EventKind::diagnosis}, {100, "V", EventKind::visit_end}}),
      // censored at the last event
      timeline("d", {{10, "X", EventKind::diagnosis}, {380, "V", EventKind::visit_end},
                     {400, "Y", EventKind::other}, {455, "Z", EventKind::other}}),
  };
  const TargetTask t = make_task_labels(tls, def("T"));
  CHECK(t.skipped == 1);
  CHECK(t.excluded == 1);
  REQUIRE(t.samples.size() == 2);
  CHECK(t.samples[0].patient == 0);
  CHECK(t.samples[0].prediction_time == 400);
  CHECK(t.samples[0].position == 2);
  CHECK(t.samples[0].time == 30);
  CHECK(t.samples[0].event);
  CHECK(t.samples[1].patient == 3);
  CHECK(t.samples[1].time == 75);
  CHECK(!t.samples[1].event);
  CHECK(t.observations().size() == 2);
  CHECK(t.events() == 1);

  // ontology descendants count as the target
  Ontology o;
  o.add_code("T");
  o.add_code("T.child", {"T"});
  tls[0].events[3].code = "T.child";
  const TargetTask viaont = make_task_labels(tls, def("T"), &o);
  CHECK(viaont.samples[0].event);
  CHECK(!make_task_labels(tls, def("T")).samples[0].event);
}

TEST_CASE("task labels match a brute-force scan") {
  const auto cohort = generate(default_generator_spec(20, 11));
  const TargetTask t = make_task_labels(cohort.timelines, def("T1"));
  std::size_t accounted = t.samples.size() + t.skipped + t.excluded;
  CHECK(accounted == 20);
  for (const TaskSample& s : t.samples) {
    const EventTimeline& tl = cohort.timelines[s.patient];
    bool is_candidate = false;
    for (const Event& e : tl.events)
      is_candidate |= e.kind == EventKind::visit_end && e.time == s.prediction_time;
    CHECK(is_candidate);
    CHECK(s.prediction_time >= tl.events.front().time + 365);
    CHECK(s.prediction_time < tl.censor_time());
    // first target strictly after, nothing at or before
    std::optional<double> first;
    for (const Event& e : tl.events)
      if (e.code == "T1") {
        CHECK(e.time > s.prediction_time);
        if (!first) first = e.time;
      }
    CHECK(s.event == first.has_value());
    CHECK(s.time == (first ? *first : tl.censor_time()) - s.prediction_time);
    CHECK(tl.events[s.position].time <= s.prediction_time);
    CHECK((s.position + 1 == tl.events.size() || tl.events[s.position + 1].time > s.prediction_time));
  }
  // per-patient draws: the same patient gets the same prediction time in any cohort order
  std::vector<EventTimeline> rev(cohort.timelines.rbegin(), cohort.timelines.rend());
  const TargetTask r = make_task_labels(rev, def("T1"));
  REQUIRE(r.samples.size() == t.samples.size());
  for (const TaskSample& s : r.samples)
    for (const TaskSample& u : t.samples)
      if (cohort.timelines[u.patient].patient_id == rev[s.patient].patient_id)
        CHECK(s.prediction_time == u.prediction_time);
}

TEST_CASE("label fraction") {
  TargetTask t;
  for (std::size_t i = 0; i < 100; ++i) t.samples.push_back({i, 0, 0, 1.0, i % 2 == 0});
  const TargetTask f = label_fraction(t, 0.05, 3);
  CHECK(f.samples.size() == 5);
  for (std::size_t i = 1; i < f.samples.size(); ++i) CHECK(f.samples[i - 1].patient < f.samples[i].patient);
  CHECK(label_fraction(t, 0.05, 3).samples == f.samples);
  CHECK(label_fraction(t, 0.001, 3).samples.size() == 1);
  CHECK(label_fraction(t, 1.0, 3).samples == t.samples);
  CHECK_THROWS_AS(label_fraction(t, 0.0, 3), ConfigError);
}

TEST_CASE("task definition json") {
  TaskDefinition d = def("T9");
  d.min_history_days = 30;
  d.seed = 77;
  const TaskDefinition r = TaskDefinition::from_json(d.to_json());
  CHECK(r.name == "T9");
  CHECK(r.target_codes == d.target_codes);
  CHECK(r.min_history_days == 30);
  CHECK(r.seed == 77);
  CHECK_THROWS_AS(TaskDefinition::from_json("{\"name\":\"x\",\"target_codes\":[]}"), ConfigError);
  CHECK_THROWS_AS(TaskDefinition::from_json("{"), ConfigError);
}

TEST_CASE("probe recovers the closed-form MLE for one-hot states") {
  // groups A, B, C with states [0,0,1], [1,0,1], [0,1,1]
  ProbeFeatures f;
  const double rates[3] = {0.01, 0.03, 0.002};
  std::mt19937_64 rng(5);
  const int per = 400;
  f.states = Eigen::MatrixXd::Zero(3 * per, 3);
  f.exposure = Eigen::MatrixXd::Zero(3 * per, 1);
  f.events = Eigen::MatrixXd::Zero(3 * per, 1);
  double d[3] = {0, 0, 0}, u[3] = {0, 0, 0};
  for (int g = 0; g < 3; ++g)
    for (int i = 0; i < per; ++i) {
      const int r = g * per + i;
      f.states(r, 2) = 1.0;
      if (g > 0) f.states(r, g - 1) = 1.0;
      const double t = std::exponential_distribution<double>(rates[g])(rng);
      const double c = std::exponential_distribution<double>(0.005)(rng);
      f.exposure(r, 0) = std::min(t, c);
      f.events(r, 0) = t <= c;
      d[g] += f.events(r, 0);
      u[g] += f.exposure(r, 0);
    }
  const ProbeFit fit = fit_probe(f, 0.0);
  CHECK(fit.converged);
  CHECK(fit.beta(2) == doctest::Approx(std::log(d[0] / u[0])).epsilon(1e-9));
  CHECK(fit.beta(0) == doctest::Approx(std::log((d[1] / u[1]) / (d[0] / u[0]))).epsilon(1e-9));
  CHECK(fit.beta(1) == doctest::Approx(std::log((d[2] / u[2]) / (d[0] / u[0]))).epsilon(1e-9));

  // ridge shrinks the non-bias weights only
  const ProbeFit ridge = fit_probe(f, 1.0);
  CHECK(std::abs(ridge.beta(0)) < std::abs(fit.beta(0)));
  CHECK(std::abs(ridge.beta(1)) < std::abs(fit.beta(1)));
}

TEST_CASE("linear probe leaves the backbone bit-identical") {
  const Fixture& fx = fixture();
  REQUIRE(fx.train_ex.size() > 50);
  AdaptConfig cfg;
  const TaskModel tm = linear_probe(fx.base, def("T3"), fx.train_ex, fx.val_ex, cfg);
  CHECK(tm.mode == AdaptMode::probe);
  CHECK(std::isfinite(tm.validation_nll));
  CHECK(tm.model.params.head.task_embeddings.rows() == 1);
  bool same = true;
  std::vector<const Matrix<float>*> a;
  fx.base.params.encoder.visit([&](const std::string&, const Matrix<float>& m) { a.push_back(&m); });
  std::size_t i = 0;
  tm.model.params.encoder.visit([&](const std::string&, const Matrix<float>& m) { same &= m == *a[i++]; });
  CHECK(same);
  CHECK(tm.model.params.head.time_projection == fx.base.params.head.time_projection);
  CHECK(tm.model.params.head.projection_bias == fx.base.params.head.projection_bias);
  CHECK(tm.model.grid == fx.base.grid);
  CHECK(tm.model.vocab.codes() == fx.base.vocab.codes());

  // the fitted vector is the optimum of the chosen penalty
  const ProbeFeatures ft = probe_features(fx.base, fx.train_ex);
  const ProbeFit fit = fit_probe(ft, tm.l2);
  for (Eigen::Index k = 0; k < fit.beta.size(); ++k)
    CHECK(tm.model.params.head.task_embeddings(0, k) == static_cast<float>(fit.beta(k)));

  // predictions come from the same states
  const auto curves = predict(tm.model, fx.val_ex);
  REQUIRE(curves.size() == fx.val_ex.size());
  for (const auto& c : curves) CHECK(c.rates.size() == fx.base.grid.size());
}

TEST_CASE("finetune starts at the probe and never ends worse on validation") {
  const Fixture& fx = fixture();
  AdaptConfig cfg;
  cfg.finetune.max_epochs = 0;
  const TaskModel probe = linear_probe(fx.base, def("T3"), fx.train_ex, fx.val_ex, cfg);
  const TaskModel zero = finetune(fx.base, def("T3"), fx.train_ex, fx.val_ex, cfg);
  std::vector<const Matrix<float>*> a;
  probe.model.params.visit([&](const std::string&, const Matrix<float>& m) { a.push_back(&m); });
  std::size_t i = 0;
  bool same = true;
  zero.model.params.visit([&](const std::string&, const Matrix<float>& m) { same &= m == *a[i++]; });
  CHECK(same);

  cfg.finetune.max_epochs = 2;
  const TaskModel ft = finetune(fx.base, def("T3"), fx.train_ex, fx.val_ex, cfg);
  CHECK(ft.mode == AdaptMode::finetune);
  CHECK(ft.validation_nll <= task_nll(probe.model, fx.val_ex));
  CHECK(ft.validation_nll == task_nll(ft.model, fx.val_ex));
  CHECK(ft.log.front().validation_loss == task_nll(probe.model, fx.val_ex));
}

TEST_CASE("scratch training and task model files") {
  const Fixture& fx = fixture();
  AdaptConfig cfg;
  cfg.scratch.max_epochs = 1;
  const TaskModel sc = train_scratch(fx.base.encoder_config, fx.base.head_config(), fx.base.vocab, fx.base.grid,
                                     def("T3"), fx.train_ex, fx.val_ex, cfg);
  CHECK(sc.mode == AdaptMode::scratch);
  CHECK(std::isfinite(sc.validation_nll));

  TaskModel probe = linear_probe(fx.base, def("T3"), fx.train_ex, fx.val_ex, cfg);
  probe.base_checkpoint = "model.ckpt";
  const auto path = std::filesystem::temp_directory_path() / "tte_task_model_test.bin";
  save_task_model(path, probe);
  const TaskModel back = load_task_model(path);
  CHECK(back.mode == AdaptMode::probe);
  CHECK(back.task.name == "T3");
  CHECK(back.base_checkpoint == "model.ckpt");
  CHECK(back.l2 == probe.l2);
  CHECK(back.validation_nll == probe.validation_nll);
  CHECK(back.beta() == probe.beta());
  const auto p1 = predict(probe.model, fx.val_ex), p2 = predict(back.model, fx.val_ex);
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].rates == p2[i].rates);
  std::filesystem::remove(path);
  CHECK_THROWS(load_task_model(path));
}
