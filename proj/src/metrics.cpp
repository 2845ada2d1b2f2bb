#include "tte/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tte/random.hpp"

namespace tte {

namespace {

std::vector<double> event_times(std::span<const Observation> obs) {
  std::vector<double> t;
  for (const Observation& o : obs)
    if (o.event) t.push_back(o.time);
  return t;
}

}  // namespace

KaplanMeier::KaplanMeier(std::span<const Observation> obs, bool reverse) {
  std::vector<std::size_t> order(obs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return obs[a].time < obs[b].time; });
  double s = 1.0;
  std::size_t at_risk = obs.size();
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = obs[order[i]].time;
    std::size_t d = 0, n_here = 0;
    for (; i < order.size() && obs[order[i]].time == t; ++i, ++n_here)
      if (obs[order[i]].event != reverse) ++d;
    if (d > 0) {
      s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      times_.push_back(t);
      values_.push_back(s);
    }
    at_risk -= n_here;
  }
}

double KaplanMeier::operator()(double t) const {
  auto it = std::upper_bound(times_.begin(), times_.end(), t);
  if (it == times_.begin()) return 1.0;
  return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double KaplanMeier::before(double t) const {
  auto it = std::lower_bound(times_.begin(), times_.end(), t);
  if (it == times_.begin()) return 1.0;
  return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

double event_time_quantile(std::span<const Observation> obs, double q) {
  auto t = event_times(obs);
  if (t.empty()) throw std::invalid_argument("no observed events");
  return quantile(std::move(t), q);
}

double median_event_time(std::span<const Observation> obs) { return event_time_quantile(obs, 0.5); }

// ---------------------------------------------------------------------------

TdCResult td_c_statistic(std::span<const Observation> obs, const TimeRisk& risk, std::optional<double> horizon) {
  TdCResult res;
  if (event_times(obs).empty()) return res;
  res.horizon = horizon ? *horizon : event_time_quantile(obs, 0.9);
  const KaplanMeier km(obs);

  std::vector<double> times = event_times(obs);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  double num = 0.0, den = 0.0;
  std::vector<double> controls;
  for (double t : times) {
    if (t > res.horizon) break;
    const double s = km(t);
    const double w = (km.before(t) - s) * s;
    controls.clear();
    for (std::size_t l = 0; l < obs.size(); ++l)
      if (obs[l].time > t) controls.push_back(risk(l, t));
    if (controls.empty()) continue;
    std::sort(controls.begin(), controls.end());
    double pairs_won = 0.0;
    std::size_t cases = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (!(obs[i].event && obs[i].time == t)) continue;
      ++cases;
      const double r = risk(i, t);
      const auto below = std::lower_bound(controls.begin(), controls.end(), r) - controls.begin();
      const auto not_above = std::upper_bound(controls.begin(), controls.end(), r) - controls.begin();
      pairs_won += static_cast<double>(below) + 0.5 * static_cast<double>(not_above - below);
    }
    const double auc = pairs_won / (static_cast<double>(cases) * static_cast<double>(controls.size()));
    num += auc * w;
    den += w;
    ++res.n_times;
  }
  if (den > 0.0) res.value = num / den;
  return res;
}

TdCResult td_c_statistic(std::span<const Observation> obs, std::span<const PiecewiseHazard> preds,
                         std::optional<double> horizon) {
  return td_c_statistic(
      obs, [&](std::size_t i, double t) { return preds[i].cumulative_hazard(t); }, horizon);
}

std::optional<double> harrell_c(std::span<const Observation> obs, std::span<const double> risk) {
  double correct = 0.0, tied = 0.0, incorrect = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (!obs[i].event) continue;
    for (std::size_t j = 0; j < obs.size(); ++j) {
      if (j == i) continue;
      const bool comparable = obs[i].time < obs[j].time || (obs[i].time == obs[j].time && !obs[j].event);
      if (!comparable) continue;
      if (risk[i] > risk[j])
        correct += 1.0;
      else if (risk[i] == risk[j])
        tied += 1.0;
      else
        incorrect += 1.0;
    }
  }
  const double total = correct + tied + incorrect;
  if (total == 0.0) return std::nullopt;
  return (correct + 0.5 * tied) / total;
}

std::vector<double> average_hazard_risks(std::span<const PiecewiseHazard> preds, double horizon) {
  std::vector<double> r;
  r.reserve(preds.size());
  for (const PiecewiseHazard& p : preds) r.push_back(p.average_hazard(horizon));
  return r;
}

// ---------------------------------------------------------------------------

NdResult nd_calibration(std::span<const Observation> obs, std::span<const double> predicted_survival,
                        std::size_t bins, double t_eval) {
  const std::size_t n = obs.size();
  if (bins == 0 || n < bins) throw std::invalid_argument("ND calibration needs at least one subject per bin");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return predicted_survival[a] < predicted_survival[b]; });
  NdResult res;
  res.t_eval = t_eval;
  std::size_t offset = 0;
  for (std::size_t m = 0; m < bins; ++m) {
    const std::size_t size = n / bins + (m < n % bins ? 1 : 0);
    std::vector<Observation> group;
    double mean = 0.0;
    for (std::size_t k = offset; k < offset + size; ++k) {
      group.push_back(obs[order[k]]);
      mean += predicted_survival[order[k]];
    }
    offset += size;
    mean /= static_cast<double>(size);
    const double observed = KaplanMeier(group)(t_eval);
    double var = mean * (1.0 - mean);
    if (var < 1e-6) {
      var = 1e-6;
      ++res.floored_bins;
    }
    res.chi2 += (observed - mean) * (observed - mean) / var;
  }
  return res;
}

NdResult nd_calibration(std::span<const Observation> obs, std::span<const PiecewiseHazard> preds, std::size_t bins,
                        std::optional<double> t_eval) {
  const double t = t_eval ? *t_eval : median_event_time(obs);
  std::vector<double> s;
  s.reserve(preds.size());
  for (const PiecewiseHazard& p : preds) s.push_back(p.survival(t));
  return nd_calibration(obs, s, bins, t);
}

// ---------------------------------------------------------------------------

IbsResult integrated_brier_score(std::span<const Observation> obs, const SurvivalAt& survival,
                                 std::size_t trapezoids) {
  IbsResult res;
  auto ev = event_times(obs);
  if (ev.empty() || trapezoids == 0) return res;
  res.from = quantile(ev, 0.1);
  res.to = quantile(ev, 0.9);
  if (!(res.to > res.from)) return res;
  const KaplanMeier censoring(obs, /*reverse=*/true);

  std::vector<double> score(trapezoids + 1, 0.0);
  const double step = (res.to - res.from) / static_cast<double>(trapezoids);
  for (std::size_t g = 0; g <= trapezoids; ++g) {
    const double t = g == trapezoids ? res.to : res.from + step * static_cast<double>(g);
    const double g_t = censoring(t);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const double s = survival(i, t);
      if (obs[i].time <= t && obs[i].event) {
        const double g_i = censoring(obs[i].time);
        if (g_i <= 0.0) {
          ++res.dropped;
          continue;
        }
        sum += s * s / g_i;
      } else if (obs[i].time > t) {
        if (g_t <= 0.0) {
          ++res.dropped;
          continue;
        }
        sum += (1.0 - s) * (1.0 - s) / g_t;
      }
      ++used;
    }
    score[g] = used ? sum / static_cast<double>(used) : 0.0;
  }
  double integral = 0.0;
  for (std::size_t g = 0; g < trapezoids; ++g) integral += 0.5 * (score[g] + score[g + 1]) * step;
  res.value = integral / (res.to - res.from);
  return res;
}

IbsResult integrated_brier_score(std::span<const Observation> obs, std::span<const PiecewiseHazard> preds,
                                 std::size_t trapezoids) {
  return integrated_brier_score(
      obs, [&](std::size_t i, double t) { return preds[i].survival(t); }, trapezoids);
}

// ---------------------------------------------------------------------------

BootstrapResult paired_bootstrap(std::span<const Observation> obs, std::span<const PiecewiseHazard> a,
                                 std::span<const PiecewiseHazard> b, const Metric& metric,
                                 std::size_t replicates, std::uint64_t seed) {
  if (a.size() != obs.size() || b.size() != obs.size())
    throw std::invalid_argument("paired bootstrap needs predictions for the same subjects");
  BootstrapResult res;
  const auto full_a = metric(obs, a);
  const auto full_b = metric(obs, b);
  if (!full_a || !full_b) throw std::invalid_argument("metric undefined on the full sample");
  res.delta = *full_a - *full_b;

  const std::size_t n = obs.size();
  std::vector<double> diffs;
  diffs.reserve(replicates);
  std::vector<Observation> ro(n);
  std::vector<PiecewiseHazard> ra(n), rb(n);
  for (std::size_t r = 0; r < replicates; ++r) {
    std::mt19937_64 rng(splitmix64(seed + r));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == 1000) throw std::runtime_error("bootstrap metric undefined on 1000 consecutive draws");
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = pick(rng);
        ro[k] = obs[idx];
        ra[k] = a[idx];
        rb[k] = b[idx];
      }
      const auto ma = metric(ro, ra);
      const auto mb = metric(ro, rb);
      if (ma && mb) {
        diffs.push_back(*ma - *mb);
        break;
      }
      ++res.redraws;
    }
  }
  res.replicates = diffs.size();
  res.lower = quantile(diffs, 0.025);
  res.upper = quantile(diffs, 0.975);
  return res;
}

// ---------------------------------------------------------------------------

MetricReport evaluate_predictions(const std::string& task, std::span<const Observation> obs,
                                  std::span<const PiecewiseHazard> preds, std::size_t nd_bins) {
  MetricReport rep;
  rep.task = task;
  rep.subjects = obs.size();
  for (const Observation& o : obs) rep.events += o.event ? 1 : 0;
  if (rep.events == 0) return rep;
  const TdCResult td = td_c_statistic(obs, preds);
  rep.horizon = td.horizon;
  rep.td_c = td.value;
  rep.harrell = harrell_c(obs, average_hazard_risks(preds, rep.horizon));
  if (obs.size() >= nd_bins) rep.nd = nd_calibration(obs, preds, nd_bins);
  rep.ibs = integrated_brier_score(obs, preds);
  return rep;
}

namespace {
nlohmann::ordered_json opt(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
}  // namespace

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["subjects"] = subjects;
  j["events"] = events;
  j["horizon_days"] = horizon;
  j["td_c"] = opt(td_c);
  j["td_c_risk_score"] = "predicted cumulative hazard at t";
  j["harrell_c"] = opt(harrell);
  j["harrell_risk_score"] = "average hazard over [0, horizon]";
  j["nd_chi2"] = nd.chi2;
  j["nd_t_eval_days"] = nd.t_eval;
  j["nd_floored_bins"] = nd.floored_bins;
  j["ibs"] = opt(ibs.value);
  j["ibs_range_days"] = {ibs.from, ibs.to};
  j["ibs_dropped_terms"] = ibs.dropped;
  if (td_c_vs_baseline) {
    const BootstrapResult& b = *td_c_vs_baseline;
    j["td_c_bootstrap"] = {{"delta", b.delta},         {"ci_lower", b.lower}, {"ci_upper", b.upper},
                           {"replicates", b.replicates}, {"redraws", b.redraws}};
  }
  return j.dump(2);
}

std::string MetricReport::to_table() const {
  auto fmt = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << *v;
    return s.str();
  };
  std::ostringstream out;
  out << "task            " << task << '\n'
      << "subjects        " << subjects << " (" << events << " events)\n"
      << "horizon (days)  " << fmt(horizon) << '\n'
      << "td C            " << fmt(td_c) << '\n'
      << "Harrell C       " << fmt(harrell) << '\n'
      << "ND chi2         " << fmt(nd.chi2) << " at t=" << fmt(nd.t_eval) << '\n'
      << "IBS             " << fmt(ibs.value) << '\n';
  if (td_c_vs_baseline)
    out << "td C delta      " << fmt(td_c_vs_baseline->delta) << " [" << fmt(td_c_vs_baseline->lower) << ", "
        << fmt(td_c_vs_baseline->upper) << "]\n";
  return out.str();
}

}  // namespace tte
