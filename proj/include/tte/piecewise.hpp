#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace tte {

/// Contiguous pieces [S_p, E_p) partitioning [0, inf). Stored as the P starts;
/// S_1 = 0 and E_P = +inf are implied.
class PieceGrid {
 public:
  PieceGrid() : starts_{0.0} {}
  explicit PieceGrid(std::vector<double> starts) : starts_(std::move(starts)) {
    if (starts_.empty() || starts_.front() != 0.0) throw std::invalid_argument("piece grid must start at 0");
    for (std::size_t p = 1; p < starts_.size(); ++p)
      if (!(starts_[p] > starts_[p - 1]) || !std::isfinite(starts_[p]))
        throw std::invalid_argument("piece boundaries must be finite and strictly increasing");
  }

  std::size_t size() const { return starts_.size(); }
  double start(std::size_t p) const { return starts_[p]; }
  double end(std::size_t p) const {
    return p + 1 < starts_.size() ? starts_[p + 1] : std::numeric_limits<double>::infinity();
  }
  double width(std::size_t p) const { return end(p) - start(p); }
  const std::vector<double>& starts() const { return starts_; }

  /// Index of the piece containing t (t >= 0).
  std::size_t piece_of(double t) const {
    std::size_t p = 0;
    while (p + 1 < starts_.size() && t >= starts_[p + 1]) ++p;
    return p;
  }

  /// Time spent in piece p by a subject observed over [0, t].
  double exposure(std::size_t p, double t) const {
    if (t <= start(p)) return 0.0;
    return std::min(t, end(p)) - start(p);
  }

  friend bool operator==(const PieceGrid&, const PieceGrid&) = default;

 private:
  std::vector<double> starts_;
};

/// A piecewise-constant hazard: rates[p] on grid piece p.
struct PiecewiseHazard {
  PieceGrid grid;
  std::vector<double> rates;

  double hazard(double t) const { return rates[grid.piece_of(t)]; }

  double cumulative_hazard(double t) const {
    double h = 0.0;
    for (std::size_t p = 0; p < grid.size() && t > grid.start(p); ++p) h += rates[p] * grid.exposure(p, t);
    return h;
  }

  double survival(double t) const { return std::exp(-cumulative_hazard(t)); }

  /// Cumulative hazard over [offset, offset + t], i.e. conditional on survival to offset.
  double cumulative_hazard_from(double offset, double t) const {
    return cumulative_hazard(offset + t) - cumulative_hazard(offset);
  }

  /// Mean hazard over [0, horizon].
  double average_hazard(double horizon) const { return cumulative_hazard(horizon) / horizon; }

  /// Inverse-CDF draw of an event time.
  template <typename Rng>
  double sample(Rng& rng) const {
    std::exponential_distribution<double> unit(1.0);
    double target = unit(rng);
    for (std::size_t p = 0; p < grid.size(); ++p) {
      const double mass = rates[p] * grid.width(p);
      if (target < mass || p + 1 == grid.size()) return grid.start(p) + target / rates[p];
      target -= mass;
    }
    return std::numeric_limits<double>::infinity();
  }
};

}  // namespace tte
