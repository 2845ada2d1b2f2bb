#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tte/metrics.hpp"
#include "tte/objectives.hpp"

namespace tte {

enum class AdaptMode { probe, finetune, scratch };
std::string_view to_string(AdaptMode m);
AdaptMode parse_adapt_mode(std::string_view s);

/// {name, target_codes, min_history_days, seed} as JSON.
struct TaskDefinition {
  std::string name;
  std::vector<std::string> target_codes;
  double min_history_days = 365.0;
  std::uint64_t seed = 1;

  std::string to_json() const;
  static TaskDefinition from_json(const std::string& text);
  static TaskDefinition read(const std::filesystem::path& path);
};

/// One labeled prediction time of one patient.
struct TaskSample {
  std::size_t patient = 0;   // index into the timelines
  std::size_t position = 0;  // last event at or before the prediction time
  double prediction_time = 0.0;
  double time = 0.0;  // days from prediction to event or censoring
  bool event = false;

  friend bool operator==(const TaskSample&, const TaskSample&) = default;
};

struct TargetTask {
  std::string name;
  std::vector<TaskSample> samples;
  std::size_t skipped = 0;   // no qualifying visit end
  std::size_t excluded = 0;  // target code at or before the prediction time

  std::vector<Observation> observations() const;
  std::size_t events() const;
};

/// Prediction time: a uniformly chosen visit end at least min_history_days after
/// the first event and strictly before the censor time, drawn from a per-patient
/// stream. The label is the first target occurrence strictly after it, or
/// censoring at the end of the record.
TargetTask make_task_labels(std::span<const EventTimeline> timelines, const TaskDefinition& task,
                            const Ontology* ontology = nullptr);

/// Seeded subsample keeping ceil(fraction * n) samples (at least one), order preserved.
TargetTask label_fraction(const TargetTask& task, double fraction, std::uint64_t seed);

/// One single-task example per sample over the timeline prefix ending at the prediction event.
std::vector<PatientExample> task_examples(std::span<const EventTimeline> timelines, const TargetTask& task,
                                          const Vocabulary& vocab, std::size_t max_sequence, const PieceGrid& grid);

struct AdaptConfig {
  std::vector<double> l2_grid{0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  std::size_t newton_iterations = 100;
  TrainConfig finetune{.learning_rate = 1e-4};
  TrainConfig scratch{.learning_rate = 1e-3};
  std::size_t threads = 1;
};

struct TaskModel {
  TaskDefinition task;
  AdaptMode mode = AdaptMode::probe;
  Model model;  // single-task TTE model
  std::string base_checkpoint;
  double l2 = 0.0;
  double validation_nll = 0.0;
  std::vector<LossRecord> log;

  /// Last entry of the task vector multiplies the constant 1 of the projected state.
  std::vector<double> beta() const;
};

/// Projected states [R W_p + c_p, 1] of each example's prediction row (n x P*b)
/// with the dense exposure and event indicator of every (row, piece).
struct ProbeFeatures {
  Eigen::MatrixXd states;
  Eigen::MatrixXd exposure;  // n x P
  Eigen::MatrixXd events;    // n x P
  std::size_t survival_dim() const { return exposure.cols() ? static_cast<std::size_t>(states.cols() / exposure.cols()) : 0; }
};
ProbeFeatures probe_features(const Model& base, std::span<const PatientExample> examples, std::size_t threads = 1);

struct ProbeFit {
  Eigen::VectorXd beta;
  double objective = 0.0;  // mean NLL + l2/2 |beta without bias|^2
  std::size_t iterations = 0;
  bool converged = false;
};
/// Damped Newton on the convex single-task likelihood.
ProbeFit fit_probe(const ProbeFeatures& f, double l2, std::size_t max_iterations = 100);

/// Copy of `base` carrying one TTE task with task vector `beta`.
Model single_task_model(const Model& base, const std::string& name, const Eigen::VectorXd& beta);

TaskModel linear_probe(const Model& base, const TaskDefinition& task, std::span<const PatientExample> train,
                       std::span<const PatientExample> validation, const AdaptConfig& cfg);
/// Starts from the probe solution; epoch 0 is that starting point.
TaskModel finetune(const Model& base, const TaskDefinition& task, std::span<const PatientExample> train,
                   std::span<const PatientExample> validation, const AdaptConfig& cfg);
TaskModel train_scratch(const EncoderConfig& encoder, const HeadConfig& head, const Vocabulary& vocab,
                        const PieceGrid& grid, const TaskDefinition& task, std::span<const PatientExample> train,
                        std::span<const PatientExample> validation, const AdaptConfig& cfg);

/// Predicted hazard curve of each example (time measured from its prediction time).
std::vector<PiecewiseHazard> predict(const Model& model, std::span<const PatientExample> examples,
                                     std::size_t threads = 1);
/// Mean NLL per prediction event.
double task_nll(const Model& model, std::span<const PatientExample> examples, std::size_t threads = 1);

void save_task_model(const std::filesystem::path& path, const TaskModel& model);
TaskModel load_task_model(const std::filesystem::path& path);

}  // namespace tte
