#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tte/synthgen.hpp"

using namespace tte;

namespace {

GeneratorSpec bare(std::size_t n, PiecewiseHazard base, std::uint64_t seed = 1) {
  GeneratorSpec s;
  s.n_patients = n;
  s.targets = {{"T", std::move(base)}};
  s.censor_hazard = 1e-7;
  s.visit_rate = 0.0;
  s.seed = seed;
  return s;
}

std::vector<double> event_times(const SyntheticCohort& c) {
  std::vector<double> t;
  for (const auto& p : c.truth.patients)
    if (auto e = p.targets.at("T").event_time) t.push_back(*e);
  return t;
}

}  // namespace

TEST_CASE("exponential mean") {
  const auto c = generate(bare(100000, {PieceGrid{}, {0.01}}));
  const auto t = event_times(c);
  CHECK(t.size() > 99000);
  double mean = 0;
  for (double x : t) mean += x;
  mean /= static_cast<double>(t.size());
  CHECK(mean == doctest::Approx(100.0).epsilon(0.02));
}

TEST_CASE("chi-square goodness of fit against the exponential") {
  const double lam = 0.02;
  const auto t = event_times(generate(bare(10000, {PieceGrid{}, {lam}}, 9)));
  REQUIRE(t.size() > 9900);
  const int bins = 20;
  std::vector<double> count(bins, 0.0);
  for (double x : t) {
    const double u = 1.0 - std::exp(-lam * x);
    ++count[std::min(bins - 1, static_cast<int>(u * bins))];
  }
  const double expect = static_cast<double>(t.size()) / bins;
  double chi2 = 0;
  for (double c : count) chi2 += (c - expect) * (c - expect) / expect;
  CHECK(chi2 < 36.19);  // 0.99 quantile of chi-square with 19 dof
}

TEST_CASE("two-piece survival KS") {
  const PiecewiseHazard h{PieceGrid({0.0, 10.0}), {0.05, 0.2}};
  auto t = event_times(generate(bare(100000, h, 3)));
  REQUIRE(t.size() > 99000);
  std::sort(t.begin(), t.end());
  const double n = static_cast<double>(t.size());
  double d = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double F = 1.0 - std::exp(-(0.05 * std::min(t[i], 10.0) + 0.2 * std::max(0.0, t[i] - 10.0)));
    d = std::max({d, std::abs(F - static_cast<double>(i) / n), std::abs(F - static_cast<double>(i + 1) / n)});
  }
  CHECK(d < 1.63 / std::sqrt(n));  // 0.01 level
}

TEST_CASE("risk multiplier hazard ratio") {
  GeneratorSpec s = bare(100000, {PieceGrid{}, {0.01}}, 5);
  s.risk_codes = {{"R", 0.5, 0.0}};
  s.risk_rules = {{"R", "T", 2.0}};
  const auto c = generate(s);
  double ev[2] = {0, 0}, ex[2] = {0, 0};
  for (const auto& p : c.truth.patients) {
    const auto& tt = p.targets.at("T");
    const int g = tt.multiplier > 1.0 ? 1 : 0;
    const double horizon = p.record_end - p.followup_start;
    ev[g] += tt.event_time.has_value();
    ex[g] += tt.event_time ? *tt.event_time : horizon;
  }
  CHECK((ev[1] / ex[1]) / (ev[0] / ex[0]) == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("true_survival closed form") {
  GroundTruth g;
  g.base_hazards["T"] = {PieceGrid{}, {0.1}};
  g.base_hazards["U"] = {PieceGrid({0.0, 10.0}), {0.1, 0.3}};
  PatientTruth p{"a", 0.0, 100.0, {{"T", {1.0, std::nullopt}}, {"U", {2.0, std::nullopt}}}};
  g.patients.push_back(p);
  CHECK(true_survival(g, 0, "T", 0.0) == 1.0);
  CHECK(true_survival(g, 0, "T", 10.0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  CHECK(true_survival(g, 0, "U", 15.0) == doctest::Approx(std::exp(-2.0 * (1.0 + 1.5))).epsilon(1e-14));
  double prev = 1.0;
  for (double t = 0; t < 60; t += 0.5) {
    const double s = true_survival(g, 0, "U", t);
    CHECK(s <= prev);
    CHECK(std::abs(s - true_survival(g, 0, "U", t + 1e-9)) < 1e-8);
    prev = s;
  }
  g.patients[0].targets["T"].multiplier = 1e6;
  CHECK(true_survival(g, 0, "T", 1.0) < 1e-12);
}

TEST_CASE("generator output contract") {
  const auto c = generate(default_generator_spec(200, 4));
  REQUIRE(c.timelines.size() == 200);
  for (const auto& tl : c.timelines) {
    REQUIRE(!tl.events.empty());
    for (std::size_t i = 1; i < tl.events.size(); ++i) CHECK(tl.events[i - 1].time <= tl.events[i].time);
    for (const auto& e : tl.events) {
      CHECK(e.time >= tl.birth_time);
      CHECK(c.ontology.contains(e.code));
      CHECK(e.time == std::floor(e.time));
    }
  }
  // same seed, same cohort; independent of cohort size for the shared prefix
  const auto again = generate(default_generator_spec(100, 4));
  for (std::size_t i = 0; i < 100; ++i) CHECK(again.timelines[i] == c.timelines[i]);
  std::ostringstream a, b;
  c.truth.write_jsonl(a);
  generate(default_generator_spec(200, 4)).truth.write_jsonl(b);
  CHECK(a.str() == b.str());

  GeneratorSpec bad = default_generator_spec(10, 1);
  bad.risk_rules.push_back({"nope", "T1", 2.0});
  CHECK_THROWS_AS(generate(bad), std::invalid_argument);
  bad = default_generator_spec(10, 1);
  bad.risk_rules[0].hazard_multiplier = 0.0;
  CHECK_THROWS_AS(generate(bad), std::invalid_argument);
}
