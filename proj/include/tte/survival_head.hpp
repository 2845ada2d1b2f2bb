#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tte/event_store.hpp"
#include "tte/ontology.hpp"
#include "tte/piecewise.hpp"
#include "tte/tensor.hpp"

namespace tte {

/// Boundaries at the p/P quantiles of pooled event times; last piece open.
/// Throws std::invalid_argument with fewer than P distinct times or when two
/// quantiles coincide.
PieceGrid fit_pieces(std::vector<double> event_times, std::size_t pieces);

// ---------------------------------------------------------------------------
// Sparse labels

/// delta = 1 for (row, task, piece) with the event `time` days into the piece.
struct EventEntry {
  std::uint32_t row;
  std::uint32_t task;
  std::uint32_t piece;
  float time;
};

/// U = 0 for (row, task) in every piece >= first_piece (the event came earlier).
struct CensorOverride {
  std::uint32_t row;
  std::uint32_t task;
  std::uint32_t first_piece;
};

/// Source of a batch row: patient index and event position in the embedded sequence.
struct RowRef {
  std::uint32_t patient;
  std::uint32_t position;
};

/// Time-to-event labels for `rows` prediction events, `tasks` tasks and the
/// grid's pieces. Dense default exposure U0 [rows x pieces] is shared by all
/// tasks; events and their trailing zero-exposure overrides are sparse.
class SurvivalBatch {
 public:
  SurvivalBatch() = default;
  SurvivalBatch(std::size_t tasks, PieceGrid grid) : tasks_(tasks), grid_(std::move(grid)) {}

  std::size_t rows() const { return refs_.size(); }
  std::size_t tasks() const { return tasks_; }
  std::size_t pieces() const { return grid_.size(); }
  const PieceGrid& grid() const { return grid_; }

  float default_exposure(std::size_t row, std::size_t piece) const { return u0_[row * pieces() + piece]; }
  const std::vector<float>& default_exposures() const { return u0_; }
  const std::vector<EventEntry>& events() const { return events_; }
  const std::vector<CensorOverride>& overrides() const { return overrides_; }
  const std::vector<RowRef>& refs() const { return refs_; }

  /// Appends a row censored `censor_after` days after the prediction time,
  /// with `event_times[k]` the time to task k's event (nullopt when none
  /// occurs by the censor time).
  void add_row(RowRef ref, double censor_after, std::span<const std::optional<double>> event_times);
  /// Sparse form of add_row: (task, time-to-event) pairs in any order.
  void add_row_sparse(RowRef ref, double censor_after, std::vector<std::pair<std::uint32_t, double>> task_events);

  /// Concatenates `other`, renumbering its rows and offsetting patient ids.
  void append(const SurvivalBatch& other, std::uint32_t patient_offset = 0);
  /// Rows [begin, end) as a new batch.
  SurvivalBatch slice_rows(std::size_t begin, std::size_t end) const;

  /// Indices into events()/overrides() for row r: [begin, end).
  std::pair<std::size_t, std::size_t> event_range(std::size_t row) const;
  std::pair<std::size_t, std::size_t> override_range(std::size_t row) const;

  /// Binary layout used by the bench command; see docs/formats.md.
  void write_binary(std::ostream& out) const;
  static SurvivalBatch read_binary(std::istream& in);

 private:
  std::size_t tasks_ = 0;
  PieceGrid grid_;
  std::vector<float> u0_;
  std::vector<EventEntry> events_;           // sorted by (row, piece, task)
  std::vector<CensorOverride> overrides_;    // sorted by (row, task)
  std::vector<std::uint32_t> event_offsets_{0};
  std::vector<std::uint32_t> override_offsets_{0};
  std::vector<RowRef> refs_;
};

/// Maps an event code to the task indices it counts towards: the code itself
/// and, with an ontology, each of its ancestors that is a task.
class TaskMatcher {
 public:
  TaskMatcher(const TaskSet& tasks, const Ontology* ontology = nullptr);
  const std::vector<std::uint32_t>& match(const std::string& code) const;
  std::size_t tasks() const { return tasks_; }

 private:
  std::size_t tasks_;
  std::map<std::string, std::uint32_t> index_;
  const Ontology* ontology_;  // must outlive the matcher
  mutable std::map<std::string, std::vector<std::uint32_t>> cache_;
};

struct LabelStats {
  std::size_t rows = 0;
  std::size_t skipped_after_censor = 0;
};

/// Labels for every event position of `timeline` (pretraining policy): for each
/// position j and task k, the time from event j to the next occurrence of k
/// strictly after it, censored at the end of record or death.
SurvivalBatch build_labels(const EventTimeline& timeline, std::uint32_t patient, const TaskMatcher& matcher,
                           const PieceGrid& grid, LabelStats* stats = nullptr);

/// Labels for the given positions only.
SurvivalBatch build_labels(const EventTimeline& timeline, std::uint32_t patient, const TaskMatcher& matcher,
                           const PieceGrid& grid, std::span<const std::size_t> positions,
                           LabelStats* stats = nullptr);

struct MemoryReport {
  std::size_t sparse_bytes = 0;
  std::size_t dense_bytes = 0;
  double ratio = 0.0;
};

/// Bytes of the sparse representation (U0, event entries, overrides and their
/// row offsets) against dense float32 delta and U tensors of [rows x K x P].
MemoryReport memory_report(const SurvivalBatch& batch);

// ---------------------------------------------------------------------------
// Head parameters

/// Low-rank head: M_jp = [R_j W_p + c_p, 1] of width b, log hazard
/// M_jp . beta_k. The constant last coordinate makes beta_k's last entry the
/// task bias, so every task owns exactly b parameters.
template <typename Scalar>
struct HeadParams {
  Matrix<Scalar> time_projection;  // d x P*(b-1)
  Matrix<Scalar> projection_bias;  // 1 x P*(b-1)
  Matrix<Scalar> task_embeddings;  // K x b

  static HeadParams init(std::size_t inner_dim, std::size_t pieces, std::size_t survival_dim, std::size_t tasks,
                         std::mt19937_64& rng);
  static HeadParams zeros(std::size_t inner_dim, std::size_t pieces, std::size_t survival_dim, std::size_t tasks);

  std::size_t survival_dim() const { return static_cast<std::size_t>(task_embeddings.cols()); }
  std::size_t pieces() const {
    return survival_dim() > 1 ? static_cast<std::size_t>(time_projection.cols()) / (survival_dim() - 1) : 0;
  }
  std::size_t tasks() const { return static_cast<std::size_t>(task_embeddings.rows()); }
  /// Parameters owned by one task.
  std::size_t per_task_parameters() const { return survival_dim(); }

  /// Sets each task's bias to log(events / exposure) of `batch`.
  void init_task_bias(const SurvivalBatch& batch);

  template <typename F>
  void visit(F&& f) {
    f(std::string("head.time_projection"), time_projection);
    f(std::string("head.projection_bias"), projection_bias);
    f(std::string("head.task_embeddings"), task_embeddings);
  }
  template <typename F>
  void visit(F&& f) const {
    f(std::string("head.time_projection"), time_projection);
    f(std::string("head.projection_bias"), projection_bias);
    f(std::string("head.task_embeddings"), task_embeddings);
  }
};

/// Number of parameters a full-rank map R -> log hazards needs per task.
inline std::size_t full_rank_parameters_per_task(std::size_t inner_dim, std::size_t pieces) {
  return inner_dim * pieces;
}

/// M [rows x P*b] from representations [rows x d].
template <typename Scalar>
Matrix<Scalar> project_states(const HeadParams<Scalar>& head, const Matrix<Scalar>& repr);

/// Accumulates projection gradients from dM and returns dR.
template <typename Scalar>
Matrix<Scalar> project_states_backward(const HeadParams<Scalar>& head, const Matrix<Scalar>& repr,
                                       const Matrix<Scalar>& grad_states, HeadParams<Scalar>& grads);

template <typename Scalar>
struct NllResult {
  double loss = 0.0;             // -sum(delta log lambda - lambda U)
  Matrix<Scalar> grad_states;    // dLoss/dM, [rows x P*b]
  Matrix<Scalar> grad_tasks;     // dLoss/dBeta, [K x b]
  bool overflow = false;
  std::string diagnostic;
};

/// Piecewise-exponential negative log-likelihood in one streaming pass over
/// (row, piece) blocks of `block_size` tasks; never forms [rows x K x P].
/// Accumulates in double in a fixed order, so results do not depend on
/// `block_size`.
template <typename Scalar>
NllResult<Scalar> fused_nll(const Matrix<Scalar>& states, const Matrix<Scalar>& task_embeddings,
                            const SurvivalBatch& batch, std::size_t block_size = 128);

/// Materializing reference implementation (bench and diagnostics).
template <typename Scalar>
NllResult<Scalar> dense_nll(const Matrix<Scalar>& states, const Matrix<Scalar>& task_embeddings,
                            const SurvivalBatch& batch);

/// Hazard curve of one task at one prediction event.
template <typename Scalar>
PiecewiseHazard predict_curve(const Matrix<Scalar>& states, std::size_t row, const Matrix<Scalar>& task_embeddings,
                              std::size_t task, const PieceGrid& grid);

template <typename Scalar>
double predict_survival(const Matrix<Scalar>& states, std::size_t row, const Matrix<Scalar>& task_embeddings,
                        std::size_t task, const PieceGrid& grid, double t) {
  return predict_curve(states, row, task_embeddings, task, grid).survival(t);
}

template <typename Scalar>
double predict_hazard(const Matrix<Scalar>& states, std::size_t row, const Matrix<Scalar>& task_embeddings,
                      std::size_t task, const PieceGrid& grid, double t) {
  return predict_curve(states, row, task_embeddings, task, grid).hazard(t);
}

}  // namespace tte
