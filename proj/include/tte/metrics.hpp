#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tte/piecewise.hpp"

namespace tte {

/// One evaluation subject: observed time (days) and event indicator.
struct Observation {
  double time = 0.0;
  bool event = false;
};

/// Right-continuous product-limit step function.
class KaplanMeier {
 public:
  KaplanMeier() = default;
  /// Fits on all observations. `reverse` estimates the censoring distribution.
  KaplanMeier(std::span<const Observation> obs, bool reverse = false);

  /// S(t), including the jump at t.
  double operator()(double t) const;
  /// S(t-), excluding the jump at t.
  double before(double t) const;

  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> times_;   // distinct event times, ascending
  std::vector<double> values_;  // survival just after each time
};

/// Numpy-style linear-interpolation quantile of `values` (copied and sorted).
double quantile(std::vector<double> values, double q);

/// 90th percentile of observed event times; the evaluation horizon.
double event_time_quantile(std::span<const Observation> obs, double q);

/// Risk score of subject i at time t.
using TimeRisk = std::function<double(std::size_t subject, double t)>;

struct TdCResult {
  std::optional<double> value;  // nullopt when the total weight is zero
  double horizon = 0.0;
  std::size_t n_times = 0;  // event times that contributed
};

/// Time-dependent C: sum_t AUC(t) w(t) / sum_t w(t) over distinct event times
/// t <= horizon, with w(t) = (S(t-) - S(t)) * S(t) from the pooled KM. At each
/// t every event at t is a case and every subject with observed time > t is a
/// control; tied risks count one half.
TdCResult td_c_statistic(std::span<const Observation> obs, const TimeRisk& risk, std::optional<double> horizon = {});
/// Risk score is the predicted cumulative hazard at t.
TdCResult td_c_statistic(std::span<const Observation> obs, std::span<const PiecewiseHazard> preds,
                         std::optional<double> horizon = {});

/// Harrell's C over comparable pairs: (i, j) with T_i < T_j and i an event, or
/// T_i == T_j with i an event and j censored.
std::optional<double> harrell_c(std::span<const Observation> obs, std::span<const double> risk);

/// Per-subject average hazard over [0, horizon].
std::vector<double> average_hazard_risks(std::span<const PiecewiseHazard> preds, double horizon);

struct NdResult {
  double chi2 = 0.0;
  double t_eval = 0.0;
  std::size_t floored_bins = 0;  // bins whose variance term hit the 1e-6 floor
};

/// Nam-D'Agostino statistic without the n_m factor. Subjects are sorted by
/// predicted S(t_eval) and split into `bins` near-equal groups.
NdResult nd_calibration(std::span<const Observation> obs, std::span<const double> predicted_survival,
                        std::size_t bins, double t_eval);
NdResult nd_calibration(std::span<const Observation> obs, std::span<const PiecewiseHazard> preds,
                        std::size_t bins = 10, std::optional<double> t_eval = {});

/// Median observed event time.
double median_event_time(std::span<const Observation> obs);

using SurvivalAt = std::function<double(std::size_t subject, double t)>;

struct IbsResult {
  std::optional<double> value;
  double from = 0.0;
  double to = 0.0;
  std::size_t dropped = 0;  // (subject, time) terms with zero censoring survival
};

/// IPCW Brier score integrated by the trapezoid rule over [q10, q90] of event
/// times with `trapezoids` panels, divided by the range length.
IbsResult integrated_brier_score(std::span<const Observation> obs, const SurvivalAt& survival,
                                 std::size_t trapezoids = 256);
IbsResult integrated_brier_score(std::span<const Observation> obs, std::span<const PiecewiseHazard> preds,
                                 std::size_t trapezoids = 256);

using Metric = std::function<std::optional<double>(std::span<const Observation>, std::span<const PiecewiseHazard>)>;

struct BootstrapResult {
  double delta = 0.0;  // metric(A) - metric(B) on the full sample
  double lower = 0.0;  // 2.5th percentile of replicate differences
  double upper = 0.0;  // 97.5th percentile
  std::size_t replicates = 0;
  std::size_t redraws = 0;
};

/// Paired test-set bootstrap of metric(A) - metric(B). Each replicate draws its
/// own seed from `seed`; undefined replicates are redrawn.
BootstrapResult paired_bootstrap(std::span<const Observation> obs, std::span<const PiecewiseHazard> a,
                                 std::span<const PiecewiseHazard> b, const Metric& metric,
                                 std::size_t replicates = 1000, std::uint64_t seed = 0);

/// The four reported metrics for one task.
struct MetricReport {
  std::string task;
  std::size_t subjects = 0;
  std::size_t events = 0;
  double horizon = 0.0;
  std::optional<double> td_c;
  std::optional<double> harrell;
  NdResult nd;
  IbsResult ibs;
  std::optional<BootstrapResult> td_c_vs_baseline;

  std::string to_json() const;
  std::string to_table() const;
};

MetricReport evaluate_predictions(const std::string& task, std::span<const Observation> obs,
                                  std::span<const PiecewiseHazard> preds, std::size_t nd_bins = 10);

}  // namespace tte
