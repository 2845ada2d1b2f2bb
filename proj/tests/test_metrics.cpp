#include <doctest.h>

#include <cmath>

#include "checks.hpp"
#include "tte/metrics.hpp"

using namespace tte;

namespace {

std::vector<PiecewiseHazard> constant_preds(const std::vector<double>& rates) {
  std::vector<PiecewiseHazard> p;
  for (double r : rates) p.push_back({PieceGrid{}, {r}});
  return p;
}

}  // namespace

TEST_CASE("Kaplan-Meier hand cases") {
  const std::vector<Observation> obs{{1, true}, {2, false}, {3, true}, {3, true}, {4, false}};
  const KaplanMeier km(obs);
  CHECK(km(0.5) == 1.0);
  CHECK(km(1.0) == doctest::Approx(0.8));
  CHECK(km.before(1.0) == 1.0);
  CHECK(km(2.5) == doctest::Approx(0.8));
  CHECK(km(3.0) == doctest::Approx(0.8 / 3.0));
  CHECK(km.before(3.0) == doctest::Approx(0.8));
  CHECK(km(10.0) == doctest::Approx(0.8 / 3.0));
  const KaplanMeier g(obs, true);  // censoring distribution
  CHECK(g(2.0) == doctest::Approx(0.75));
  CHECK(g(4.0) == 0.0);
  for (double t : {0.0, 1.0, 2.0, 3.0, 3.5, 4.0, 7.0}) {
    CHECK(km(t) == doctest::Approx(oracle::km(obs, t)).epsilon(1e-15));
    CHECK(km.before(t) == doctest::Approx(oracle::km(obs, t, true)).epsilon(1e-15));
    CHECK(g(t) == doctest::Approx(oracle::km(obs, t, false, true)).epsilon(1e-15));
  }
}

TEST_CASE("quantile matches linear interpolation") {
  CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
  CHECK(quantile({5}, 0.9) == 5.0);
  CHECK(quantile({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.9) == doctest::Approx(9.1));
  CHECK(median_event_time(std::vector<Observation>{{1, true}, {9, false}, {3, true}}) == 2.0);
}

TEST_CASE("metrics agree with brute force on random instances") {
  const auto r = checks::metric_oracles(2024, 100);
  CHECK(r.instances == 100);
  CHECK(r.definedness_mismatches == 0);
  CHECK(r.td_c <= 1e-10);
  CHECK(r.harrell <= 1e-10);
  CHECK(r.nd <= 1e-10);
  CHECK(r.ibs <= 1e-10);
}

TEST_CASE("concordance edge cases") {
  std::vector<Observation> obs;
  std::vector<double> rates;
  for (int i = 0; i < 12; ++i) {
    obs.push_back({static_cast<double>(1 + i), i % 3 != 2});
    rates.push_back(1.0 / (1.0 + i));  // earlier failure, higher hazard
  }
  const auto preds = constant_preds(rates);
  CHECK(td_c_statistic(obs, preds).value == 1.0);
  CHECK(harrell_c(obs, rates) == 1.0);

  const auto flat = constant_preds(std::vector<double>(12, 0.1));
  CHECK(td_c_statistic(obs, flat).value == 0.5);
  CHECK(harrell_c(obs, std::vector<double>(12, 0.3)) == 0.5);

  // no comparable pairs
  const std::vector<Observation> censored{{1, false}, {2, false}};
  CHECK(!harrell_c(censored, std::vector<double>{1, 2}).has_value());
  CHECK(!td_c_statistic(censored, constant_preds({1, 2}), 5.0).value.has_value());
}

TEST_CASE("ND calibration") {
  // predictions equal to the per-bin KM survival give zero
  std::vector<Observation> obs;
  for (int i = 0; i < 20; ++i) obs.push_back({static_cast<double>(i % 2 ? 10 : 1), i % 2 == 0});
  const std::vector<double> s(20, 0.5);
  const auto r = nd_calibration(obs, s, 2, 5.0);
  CHECK(r.chi2 == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.floored_bins == 0);
  // degenerate prediction hits the variance floor
  const auto f = nd_calibration(obs, std::vector<double>(20, 1.0), 2, 5.0);
  CHECK(f.floored_bins == 2);
  CHECK(f.chi2 == doctest::Approx(2 * 0.25 / 1e-6));
  CHECK_THROWS_AS(nd_calibration(obs, s, 21, 5.0), std::invalid_argument);
}

TEST_CASE("integrated Brier score properties") {
  std::mt19937_64 rng(8);
  std::exponential_distribution<double> ex(0.05), cx(0.02);
  std::vector<Observation> obs;
  for (int i = 0; i < 400; ++i) {
    const double t = std::ceil(ex(rng)), c = std::ceil(cx(rng));
    obs.push_back({std::min(t, c), t <= c});
  }
  const auto truth = constant_preds(std::vector<double>(obs.size(), 0.05));
  const auto wrong = constant_preds(std::vector<double>(obs.size(), 0.5));
  const auto ibs_true = integrated_brier_score(obs, truth);
  const auto ibs_wrong = integrated_brier_score(obs, wrong);
  REQUIRE(ibs_true.value);
  REQUIRE(ibs_wrong.value);
  CHECK(*ibs_true.value >= 0.0);
  CHECK(*ibs_true.value <= 0.25 + 1e-12);
  CHECK(*ibs_true.value < *ibs_wrong.value);
  CHECK(ibs_true.from < ibs_true.to);
  CHECK(!integrated_brier_score(std::vector<Observation>{{1, false}}, constant_preds({0.1})).value);
}

TEST_CASE("paired bootstrap") {
  std::mt19937_64 rng(2);
  std::exponential_distribution<double> ex(0.1);
  std::vector<Observation> obs;
  std::vector<double> good, bad;
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (int i = 0; i < 150; ++i) {
    const double m = u(rng);
    const double t = std::ceil(std::exponential_distribution<double>(0.05 * m)(rng));
    obs.push_back({std::min(t, 60.0), t <= 60.0});
    good.push_back(0.05 * m);
    bad.push_back(0.05 * u(rng));
  }
  const auto a = constant_preds(good), b = constant_preds(bad);
  const Metric tdc = [](std::span<const Observation> o, std::span<const PiecewiseHazard> p) {
    return td_c_statistic(o, p).value;
  };
  const auto same = paired_bootstrap(obs, a, a, tdc, 200, 5);
  CHECK(same.delta == 0.0);
  CHECK(same.lower == 0.0);
  CHECK(same.upper == 0.0);
  CHECK(same.replicates == 200);

  const auto r1 = paired_bootstrap(obs, a, b, tdc, 200, 5);
  const auto r2 = paired_bootstrap(obs, a, b, tdc, 200, 5);
  CHECK(r1.delta == r2.delta);
  CHECK(r1.lower == r2.lower);
  CHECK(r1.upper == r2.upper);
  CHECK(r1.delta > 0.0);
  CHECK(r1.lower <= r1.delta);
  CHECK(r1.delta <= r1.upper);
}

TEST_CASE("report rendering") {
  std::vector<Observation> obs;
  std::vector<double> rates;
  for (int i = 0; i < 30; ++i) {
    obs.push_back({static_cast<double>(1 + i), i % 2 == 0});
    rates.push_back(0.01 * (30 - i));
  }
  const auto rep = evaluate_predictions("T", obs, constant_preds(rates));
  CHECK(rep.subjects == 30);
  CHECK(rep.events == 15);
  CHECK(rep.td_c.has_value());
  CHECK(rep.to_json().find("\"task\"") != std::string::npos);
  CHECK(!rep.to_table().empty());
}
