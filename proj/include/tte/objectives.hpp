#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tte/encoder.hpp"
#include "tte/ontology.hpp"
#include "tte/survival_head.hpp"

namespace tte {

enum class Objective { tte, next_code };
std::string_view to_string(Objective o);
Objective parse_objective(std::string_view s);

struct HeadConfig {
  std::size_t num_time_pieces = 8;
  std::size_t survival_dim = 32;
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double warmup_fraction = 0.05;
  std::size_t max_epochs = 10;
  std::size_t patience = 2;
  std::size_t batch_patients = 16;
  double grad_clip = 1.0;  // global L2 norm, 0 disables
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  void validate() const;
};

/// Every trainable tensor of a model.
template <typename Scalar>
struct ModelParams {
  EncoderParams<Scalar> encoder;
  HeadParams<Scalar> head;
  Matrix<Scalar> next_code;  // K x d output embeddings, next-code objective only

  template <typename F>
  void visit(F&& f) {
    encoder.visit(f);
    head.visit(f);
    f(std::string("next_code.targets"), next_code);
  }
  template <typename F>
  void visit(F&& f) const {
    encoder.visit(f);
    head.visit(f);
    f(std::string("next_code.targets"), next_code);
  }

  ModelParams zeros_like() const;
  std::size_t count() const;
};

struct Model {
  Objective objective = Objective::tte;
  EncoderConfig encoder_config;
  Vocabulary vocab;
  PieceGrid grid;
  TaskSet tasks;  // TTE tasks, or the next-code dictionary
  ModelParams<float> params;
  std::string loss_normalization = "per_prediction_event";

  HeadConfig head_config() const {
    return {params.head.pieces(), params.head.survival_dim()};
  }
};

/// Fresh parameters. The next-code objective gets a fixed identity time
/// projection of width inner_dim + 1 so its representations can be probed.
Model init_model(Objective objective, const EncoderConfig& encoder, const HeadConfig& head, Vocabulary vocab,
                 PieceGrid grid, TaskSet tasks, std::mt19937_64& rng);

/// Identity time projection: M_jp = [R_j, 1] for every piece.
HeadParams<float> identity_head(std::size_t inner_dim, std::size_t pieces, std::size_t tasks);

// ---------------------------------------------------------------------------
// Training examples

struct PatientExample {
  std::uint32_t patient = 0;
  EmbeddedSequence sequence;
  SurvivalBatch labels;        // TTE: one row per labeled position (RowRef.position = timeline index)
  std::vector<int> next_code;  // next-code: dictionary index of the following event, -1 when absent
};

std::vector<PatientExample> make_examples(Objective objective, std::span<const EventTimeline> timelines,
                                          const Vocabulary& vocab, std::size_t max_sequence, const TaskSet& tasks,
                                          const Ontology* ontology, const PieceGrid& grid,
                                          LabelStats* stats = nullptr);

/// Piece boundaries from the pooled event times of the TTE labels of `timelines`.
PieceGrid fit_grid(std::span<const EventTimeline> timelines, const TaskSet& tasks, const Ontology* ontology,
                   std::size_t pieces);

template <typename Scalar>
struct NextCodeResult {
  double loss = 0.0;  // summed cross-entropy
  std::size_t labeled = 0;
  Matrix<Scalar> grad_repr;     // n x d
  Matrix<Scalar> grad_targets;  // K x d
};

/// Softmax cross-entropy of logits R_j . E_k against labels[j] (skipped when < 0).
template <typename Scalar>
NextCodeResult<Scalar> next_code_loss(const Matrix<Scalar>& repr, const Matrix<Scalar>& targets,
                                      std::span<const int> labels);

struct LossSum {
  double loss = 0.0;
  std::size_t count = 0;  // prediction events
};

/// Summed loss of one patient; accumulates unscaled gradients when `grads` is set.
template <typename Scalar>
LossSum example_loss(Objective objective, const Encoder<Scalar>& encoder, const ModelParams<Scalar>& params,
                     const PatientExample& example, Mode mode, ModelParams<Scalar>* grads,
                     std::mt19937_64* rng);

// ---------------------------------------------------------------------------
// Optimisation

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t total_steps = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;
  double best_validation_loss = std::numeric_limits<double>::infinity();
  ModelParams<float> adam_m, adam_v;
  std::mt19937_64 rng;
};

/// Linear warmup over the first warmup_fraction of steps, then linear decay.
double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

class Trainer {
 public:
  Trainer(Model model, TrainConfig cfg, std::size_t total_steps);
  Trainer(Model model, TrainConfig cfg, TrainState state);

  /// One Adam step on the batch; returns the mean loss per prediction event.
  double step(std::span<const PatientExample* const> batch);
  /// Mean loss per prediction event in eval mode.
  double evaluate(std::span<const PatientExample> examples) const;

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  TrainState& state() { return state_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  Model model_;
  TrainConfig cfg_;
  TrainState state_;
  Encoder<float> encoder_;
};

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  std::optional<double> validation_loss;
};

void write_loss_csv(std::ostream& out, std::span<const LossRecord> log);

struct PretrainInputs {
  std::span<const EventTimeline> train;
  std::span<const EventTimeline> validation;
  const Ontology* ontology = nullptr;
  TaskSet tasks;
};

struct PretrainResult {
  Model model;  // parameters of the best validation epoch
  TrainState state;
  std::vector<LossRecord> log;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

/// Minimises the per-prediction-event piecewise-exponential NLL over all tasks.
/// Throws NumericalError when the training or validation loss diverges.
PretrainResult pretrain_tte(const PretrainInputs& in, const EncoderConfig& encoder, const HeadConfig& head,
                            const TrainConfig& train);
/// Same loop with the next-code softmax objective over the task dictionary.
PretrainResult pretrain_next_code(const PretrainInputs& in, const EncoderConfig& encoder, const HeadConfig& head,
                                  const TrainConfig& train);

// ---------------------------------------------------------------------------
// Checkpoints (layout in docs/formats.md)

struct Checkpoint {
  Model model;
  std::optional<TrainState> state;
  std::string extra_json = "{}";
};

void write_checkpoint(std::ostream& out, const Model& model, const TrainState* state = nullptr,
                      const std::string& extra_json = "{}");
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainState* state = nullptr,
                     const std::string& extra_json = "{}");
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Eval-mode representations of a sequence.
Matrix<float> representations(const Model& model, const EmbeddedSequence& sequence);

}  // namespace tte
