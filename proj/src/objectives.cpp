#include "tte/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "parallel.hpp"
#include "tte/random.hpp"

namespace tte {

using json = nlohmann::ordered_json;

std::string_view to_string(Objective o) { return o == Objective::tte ? "tte" : "next_code"; }

Objective parse_objective(std::string_view s) {
  if (s == "tte") return Objective::tte;
  if (s == "next_code") return Objective::next_code;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

void HeadConfig::validate() const {
  if (num_time_pieces < 1) throw ConfigError("num_time_pieces must be at least 1");
  if (survival_dim < 2) throw ConfigError("survival_dim must be at least 2");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0,1)");
  if (batch_patients < 1) throw ConfigError("batch_patients must be at least 1");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  if (threads < 1) throw ConfigError("threads must be at least 1");
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::zeros_like() const {
  ModelParams z = *this;
  z.visit([](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  return z;
}

template <typename Scalar>
std::size_t ModelParams<Scalar>::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template struct ModelParams<float>;
template struct ModelParams<double>;

HeadParams<float> identity_head(std::size_t inner_dim, std::size_t pieces, std::size_t tasks) {
  auto h = HeadParams<float>::zeros(inner_dim, pieces, inner_dim + 1, tasks);
  const auto d = static_cast<Eigen::Index>(inner_dim);
  for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(pieces); ++p)
    h.time_projection.block(0, p * d, d, d).setIdentity();
  return h;
}

Model init_model(Objective objective, const EncoderConfig& encoder, const HeadConfig& head, Vocabulary vocab,
                 PieceGrid grid, TaskSet tasks, std::mt19937_64& rng) {
  encoder.validate();
  head.validate();
  if (vocab.size() > encoder.vocab_size) throw ConfigError("vocabulary larger than vocabulary_size");
  if (grid.size() != head.num_time_pieces) throw ConfigError("piece grid does not match num_time_pieces");
  Model m;
  m.objective = objective;
  m.encoder_config = encoder;
  m.vocab = std::move(vocab);
  m.grid = std::move(grid);
  m.tasks = std::move(tasks);
  m.params.encoder = EncoderParams<float>::init(encoder, rng);
  if (objective == Objective::tte) {
    m.params.head = HeadParams<float>::init(encoder.inner_dim, head.num_time_pieces, head.survival_dim,
                                            m.tasks.size(), rng);
    m.params.next_code.resize(0, static_cast<Eigen::Index>(encoder.inner_dim));
  } else {
    m.params.head = identity_head(encoder.inner_dim, head.num_time_pieces, 0);
    m.params.next_code.resize(static_cast<Eigen::Index>(m.tasks.size()), static_cast<Eigen::Index>(encoder.inner_dim));
    std::normal_distribution<double> normal(0.0, 0.02);
    for (Eigen::Index i = 0; i < m.params.next_code.size(); ++i)
      m.params.next_code.data()[i] = static_cast<float>(normal(rng));
  }
  return m;
}

// ---------------------------------------------------------------------------

std::vector<PatientExample> make_examples(Objective objective, std::span<const EventTimeline> timelines,
                                          const Vocabulary& vocab, std::size_t max_sequence, const TaskSet& tasks,
                                          const Ontology* ontology, const PieceGrid& grid, LabelStats* stats) {
  const TaskMatcher matcher(tasks, ontology);
  std::map<std::string, int> dictionary;
  for (std::size_t k = 0; k < tasks.size(); ++k) dictionary.emplace(tasks.tasks[k], static_cast<int>(k));

  std::vector<PatientExample> out;
  out.reserve(timelines.size());
  for (std::size_t i = 0; i < timelines.size(); ++i) {
    const EventTimeline& tl = timelines[i];
    if (tl.events.empty()) continue;
    PatientExample ex;
    ex.patient = static_cast<std::uint32_t>(i);
    ex.sequence = embed_sequence(tl, vocab, max_sequence);
    const std::size_t first = ex.sequence.dropped;
    if (objective == Objective::tte) {
      std::vector<std::size_t> positions(tl.events.size() - first);
      std::iota(positions.begin(), positions.end(), first);
      ex.labels = build_labels(tl, ex.patient, matcher, grid, positions, stats);
    } else {
      ex.next_code.assign(ex.sequence.size(), -1);
      for (std::size_t j = first; j + 1 < tl.events.size(); ++j) {
        auto it = dictionary.find(tl.events[j + 1].code);
        if (it != dictionary.end()) ex.next_code[j - first] = it->second;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

PieceGrid fit_grid(std::span<const EventTimeline> timelines, const TaskSet& tasks, const Ontology* ontology,
                   std::size_t pieces) {
  const TaskMatcher matcher(tasks, ontology);
  const PieceGrid one;
  std::vector<double> times;
  for (std::size_t i = 0; i < timelines.size(); ++i) {
    const SurvivalBatch b = build_labels(timelines[i], static_cast<std::uint32_t>(i), matcher, one);
    for (const EventEntry& e : b.events()) times.push_back(e.time);
  }
  return fit_pieces(std::move(times), pieces);
}

template <typename Scalar>
NextCodeResult<Scalar> next_code_loss(const Matrix<Scalar>& repr, const Matrix<Scalar>& targets,
                                      std::span<const int> labels) {
  if (static_cast<std::size_t>(repr.rows()) != labels.size()) throw std::invalid_argument("one label per row");
  NextCodeResult<Scalar> r;
  r.grad_repr = Matrix<Scalar>::Zero(repr.rows(), repr.cols());
  r.grad_targets = Matrix<Scalar>::Zero(targets.rows(), targets.cols());
  for (Eigen::Index j = 0; j < repr.rows(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0) continue;
    if (y >= targets.rows()) throw std::out_of_range("next-code label outside the dictionary");
    const Eigen::VectorXd z = (targets * repr.row(j).transpose()).template cast<double>();
    const double mx = z.maxCoeff();
    const Eigen::VectorXd e = (z.array() - mx).exp();
    const double lse = mx + std::log(e.sum());
    r.loss += lse - z(y);
    ++r.labeled;
    Eigen::VectorXd g = e / e.sum();
    g(y) -= 1.0;
    const Vector<Scalar> gs = g.cast<Scalar>();
    r.grad_repr.row(j).noalias() += gs.transpose() * targets;
    r.grad_targets.noalias() += gs * repr.row(j);
  }
  return r;
}

template NextCodeResult<float> next_code_loss(const Matrix<float>&, const Matrix<float>&, std::span<const int>);
template NextCodeResult<double> next_code_loss(const Matrix<double>&, const Matrix<double>&, std::span<const int>);

template <typename Scalar>
LossSum example_loss(Objective objective, const Encoder<Scalar>& encoder, const ModelParams<Scalar>& params,
                     const PatientExample& ex, Mode mode, ModelParams<Scalar>* grads, std::mt19937_64* rng) {
  LossSum out;
  if (ex.sequence.size() == 0) return out;
  EncoderCache<Scalar> cache;
  const Matrix<Scalar> R = encoder.forward(params.encoder, ex.sequence, mode, grads ? &cache : nullptr, rng);
  Matrix<Scalar> dR;
  if (objective == Objective::tte) {
    const SurvivalBatch& b = ex.labels;
    if (b.rows() == 0) return out;
    Matrix<Scalar> sel(static_cast<Eigen::Index>(b.rows()), R.cols());
    std::vector<Eigen::Index> where(b.rows());
    for (std::size_t r = 0; r < b.rows(); ++r) {
      where[r] = static_cast<Eigen::Index>(b.refs()[r].position - ex.sequence.dropped);
      sel.row(static_cast<Eigen::Index>(r)) = R.row(where[r]);
    }
    const Matrix<Scalar> M = project_states(params.head, sel);
    const auto res = fused_nll(M, params.head.task_embeddings, b);
    if (res.overflow) throw NumericalError("patient " + std::to_string(ex.patient) + ": " + res.diagnostic);
    out.loss = res.loss;
    out.count = b.rows();
    if (!grads) return out;
    grads->head.task_embeddings += res.grad_tasks;
    const Matrix<Scalar> dsel = project_states_backward(params.head, sel, res.grad_states, grads->head);
    dR = Matrix<Scalar>::Zero(R.rows(), R.cols());
    for (std::size_t r = 0; r < b.rows(); ++r) dR.row(where[r]) += dsel.row(static_cast<Eigen::Index>(r));
  } else {
    const auto res = next_code_loss(R, params.next_code, ex.next_code);
    out.loss = res.loss;
    out.count = res.labeled;
    if (!grads || res.labeled == 0) return out;
    grads->next_code += res.grad_targets;
    dR = res.grad_repr;
  }
  encoder.backward(params.encoder, cache, dR, grads->encoder);
  return out;
}

template LossSum example_loss(Objective, const Encoder<float>&, const ModelParams<float>&, const PatientExample&,
                              Mode, ModelParams<float>*, std::mt19937_64*);
template LossSum example_loss(Objective, const Encoder<double>&, const ModelParams<double>&, const PatientExample&,
                              Mode, ModelParams<double>*, std::mt19937_64*);

// ---------------------------------------------------------------------------

double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  const std::size_t total = std::max<std::size_t>(total_steps, 1);
  const auto warm = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total))));
  if (step < warm) return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (step >= total) return 0.0;
  return cfg.learning_rate * static_cast<double>(total - step) / static_cast<double>(total - warm + 1);
}

Trainer::Trainer(Model model, TrainConfig cfg, std::size_t total_steps)
    : model_(std::move(model)), cfg_(cfg), encoder_(model_.encoder_config) {
  cfg_.validate();
  state_.total_steps = total_steps;
  state_.adam_m = model_.params.zeros_like();
  state_.adam_v = model_.params.zeros_like();
  state_.rng.seed(splitmix64(cfg_.seed));
}

Trainer::Trainer(Model model, TrainConfig cfg, TrainState state)
    : model_(std::move(model)), cfg_(cfg), state_(std::move(state)), encoder_(model_.encoder_config) {
  cfg_.validate();
}

namespace {

template <typename Scalar>
std::vector<Matrix<Scalar>*> tensors(ModelParams<Scalar>& p) {
  std::vector<Matrix<Scalar>*> out;
  p.visit([&](const std::string&, Matrix<Scalar>& m) { out.push_back(&m); });
  return out;
}

}  // namespace

double Trainer::step(std::span<const PatientExample* const> batch) {
  const std::size_t n = batch.size();
  std::vector<std::uint64_t> seeds(n);
  for (auto& s : seeds) s = state_.rng();
  std::vector<ModelParams<float>> per(n);
  std::vector<LossSum> losses(n);
  detail::parallel_for(n, cfg_.threads, [&](std::size_t i) {
    per[i] = model_.params.zeros_like();
    std::mt19937_64 r(seeds[i]);
    losses[i] = example_loss(model_.objective, encoder_, model_.params, *batch[i], Mode::train, &per[i], &r);
  });

  double loss = 0.0;
  std::size_t count = 0;
  for (const LossSum& l : losses) {
    loss += l.loss;
    count += l.count;
  }
  if (count == 0) return 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    auto dst = tensors(per[0]);
    auto src = tensors(per[i]);
    for (std::size_t t = 0; t < dst.size(); ++t) *dst[t] += *src[t];
  }
  const double mean = loss / static_cast<double>(count);
  if (!std::isfinite(mean))
    throw NumericalError("training loss is not finite at step " + std::to_string(state_.step));

  auto g = tensors(per[0]);
  const float inv = 1.0f / static_cast<float>(count);
  double norm2 = 0.0;
  for (Matrix<float>* m : g) {
    *m *= inv;
    norm2 += m->template cast<double>().squaredNorm();
  }
  if (!std::isfinite(norm2))
    throw NumericalError("gradient is not finite at step " + std::to_string(state_.step));
  const double norm = std::sqrt(norm2);
  const float clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? static_cast<float>(cfg_.grad_clip / norm) : 1.0f;

  const double lr = learning_rate_at(cfg_, state_.step, state_.total_steps);
  const double t = static_cast<double>(state_.step + 1);
  const auto b1 = static_cast<float>(cfg_.adam_beta1), b2 = static_cast<float>(cfg_.adam_beta2);
  const double c1 = 1.0 - std::pow(cfg_.adam_beta1, t), c2 = 1.0 - std::pow(cfg_.adam_beta2, t);
  const auto step_size = static_cast<float>(lr / c1);
  const auto root_c2 = static_cast<float>(std::sqrt(c2));
  const auto eps = static_cast<float>(cfg_.adam_eps);
  auto p = tensors(model_.params);
  auto m = tensors(state_.adam_m);
  auto v = tensors(state_.adam_v);
  for (std::size_t k = 0; k < p.size(); ++k) {
    const auto gk = (clip * g[k]->array()).eval();
    m[k]->array() = b1 * m[k]->array() + (1.0f - b1) * gk;
    v[k]->array() = b2 * v[k]->array() + (1.0f - b2) * gk.square();
    p[k]->array() -= step_size * m[k]->array() / (v[k]->array().sqrt() / root_c2 + eps);
  }
  // the identity projection of next-code models stays fixed
  if (model_.objective == Objective::next_code) {
    const auto fixed = identity_head(model_.encoder_config.inner_dim, model_.grid.size(), 0);
    model_.params.head.time_projection = fixed.time_projection;
    model_.params.head.projection_bias = fixed.projection_bias;
  }
  ++state_.step;
  return mean;
}

double Trainer::evaluate(std::span<const PatientExample> examples) const {
  std::vector<LossSum> losses(examples.size());
  detail::parallel_for(examples.size(), cfg_.threads, [&](std::size_t i) {
    losses[i] = example_loss<float>(model_.objective, encoder_, model_.params, examples[i], Mode::eval, nullptr, nullptr);
  });
  double loss = 0.0;
  std::size_t count = 0;
  for (const LossSum& l : losses) {
    loss += l.loss;
    count += l.count;
  }
  return count ? loss / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

void write_loss_csv(std::ostream& out, std::span<const LossRecord> log) {
  out << "step,epoch,learning_rate,train_loss,validation_loss\n";
  out.precision(10);
  for (const LossRecord& r : log) {
    out << r.step << ',' << r.epoch << ',' << r.learning_rate << ',' << r.train_loss << ',';
    if (r.validation_loss) out << *r.validation_loss;
    out << '\n';
  }
}

namespace {

PretrainResult pretrain(Objective objective, const PretrainInputs& in, const EncoderConfig& encoder,
                        const HeadConfig& head, const TrainConfig& train) {
  encoder.validate();
  head.validate();
  train.validate();
  if (in.train.empty()) throw DataError("no training patients");
  if (in.tasks.size() == 0) throw ConfigError("empty task set");

  Vocabulary vocab = Vocabulary::from_corpus(in.train, encoder.vocab_size);
  PieceGrid grid = fit_grid(in.train, in.tasks, in.ontology, head.num_time_pieces);
  std::mt19937_64 init_rng(train.seed);
  Model model = init_model(objective, encoder, head, std::move(vocab), std::move(grid), in.tasks, init_rng);

  const auto train_ex = make_examples(objective, in.train, model.vocab, encoder.max_sequence, model.tasks,
                                      in.ontology, model.grid);
  const auto val_ex = make_examples(objective, in.validation.empty() ? in.train : in.validation, model.vocab,
                                    encoder.max_sequence, model.tasks, in.ontology, model.grid);
  if (objective == Objective::tte) {
    SurvivalBatch all(model.tasks.size(), model.grid);
    for (const PatientExample& ex : train_ex) all.append(ex.labels);
    model.params.head.init_task_bias(all);
  }

  const std::size_t per_epoch = (train_ex.size() + train.batch_patients - 1) / train.batch_patients;
  Trainer trainer(std::move(model), train, per_epoch * train.max_epochs);
  PretrainResult result;
  result.model = trainer.model();
  result.state = trainer.state();

  std::vector<std::size_t> order(train_ex.size());
  std::vector<const PatientExample*> batch;
  for (std::size_t epoch = 0; epoch < train.max_epochs; ++epoch) {
    trainer.state().epoch = epoch;
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), trainer.state().rng);
    for (std::size_t s = 0; s < order.size(); s += train.batch_patients) {
      batch.clear();
      for (std::size_t i = s; i < std::min(order.size(), s + train.batch_patients); ++i)
        batch.push_back(&train_ex[order[i]]);
      LossRecord rec;
      rec.step = trainer.state().step;
      rec.epoch = epoch;
      rec.learning_rate = learning_rate_at(train, rec.step, trainer.state().total_steps);
      rec.train_loss = trainer.step(batch);
      result.log.push_back(rec);
    }
    const double val = trainer.evaluate(val_ex);
    result.log.back().validation_loss = val;
    ++result.epochs_run;
    if (!std::isfinite(val)) {
      std::ostringstream msg;
      msg << "validation loss diverged at epoch " << epoch << " (value " << val << ", last train loss "
          << result.log.back().train_loss << ", learning rate " << result.log.back().learning_rate << ")";
      throw NumericalError(msg.str());
    }
    TrainState& st = trainer.state();
    if (val < st.best_validation_loss) {
      st.best_validation_loss = val;
      st.best_epoch = epoch;
      st.epochs_since_best = 0;
      result.model = trainer.model();
      result.state = st;
    } else if (++st.epochs_since_best >= train.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace

PretrainResult pretrain_tte(const PretrainInputs& in, const EncoderConfig& encoder, const HeadConfig& head,
                            const TrainConfig& train) {
  return pretrain(Objective::tte, in, encoder, head, train);
}

PretrainResult pretrain_next_code(const PretrainInputs& in, const EncoderConfig& encoder, const HeadConfig& head,
                                  const TrainConfig& train) {
  return pretrain(Objective::next_code, in, encoder, head, train);
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'T', 'T', 'E', 'C', 'K', 'P', 'T', '1'};

json encoder_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size},       {"inner_dim", c.inner_dim},
          {"layers", c.layers},               {"heads", c.heads},
          {"attention_window", c.attention_window}, {"max_sequence", c.max_sequence},
          {"dropout", c.dropout},             {"rotary_base", c.rotary_base}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size");
  c.inner_dim = j.at("inner_dim");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.attention_window = j.at("attention_window");
  c.max_sequence = j.at("max_sequence");
  c.dropout = j.at("dropout");
  c.rotary_base = j.at("rotary_base");
  return c;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void write_checkpoint(std::ostream& out, const Model& model, const TrainState* state, const std::string& extra_json) {
  json h;
  h["format"] = "tte-checkpoint";
  h["version"] = 1;
  h["objective"] = to_string(model.objective);
  h["encoder"] = encoder_json(model.encoder_config);
  h["head"] = {{"num_time_pieces", model.params.head.pieces()}, {"survival_dim", model.params.head.survival_dim()},
               {"tasks", model.params.head.tasks()}};
  h["piece_starts"] = model.grid.starts();
  h["vocabulary"] = std::vector<std::string>(model.vocab.codes().begin() + 1, model.vocab.codes().end());
  h["tasks"] = model.tasks.tasks;
  json ent = json::array();
  for (double e : model.tasks.entropies) ent.push_back(finite_or_null(e));
  h["task_entropies"] = ent;
  h["excluded"] = std::vector<std::string>(model.tasks.excluded.begin(), model.tasks.excluded.end());
  h["loss_normalization"] = model.loss_normalization;

  std::vector<const Matrix<float>*> data;
  json table = json::array();
  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const Matrix<float>& m) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(m.size()) * sizeof(float);
    table.push_back({{"name", name},
                     {"dtype", "f32"},
                     {"shape", {m.rows(), m.cols()}},
                     {"offset", offset},
                     {"bytes", bytes}});
    offset += bytes;
    data.push_back(&m);
  };
  model.params.visit(add);
  if (state) {
    h["train_state"] = {{"step", state->step},
                        {"epoch", state->epoch},
                        {"total_steps", state->total_steps},
                        {"best_epoch", state->best_epoch},
                        {"epochs_since_best", state->epochs_since_best},
                        {"best_validation_loss", finite_or_null(state->best_validation_loss)},
                        {"rng", rng_state(state->rng)}};
    state->adam_m.visit([&](const std::string& n, const Matrix<float>& m) { add("adam_m/" + n, m); });
    state->adam_v.visit([&](const std::string& n, const Matrix<float>& m) { add("adam_v/" + n, m); });
  }
  h["tensors"] = table;
  h["extra"] = json::parse(extra_json);

  const std::string header = h.dump();
  out.write(kMagic, 8);
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Matrix<float>* m : data)
    out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(float)));
  if (!out) throw std::runtime_error("failed to write checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a checkpoint file");
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), 8)) throw DataError("truncated checkpoint header");
  std::string header(len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(len))) throw DataError("truncated checkpoint header");
  json h;
  try {
    h = json::parse(header);
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  Model& m = ck.model;
  m.objective = parse_objective(h.at("objective").get<std::string>());
  m.encoder_config = encoder_from_json(h.at("encoder"));
  m.grid = PieceGrid(h.at("piece_starts").get<std::vector<double>>());
  m.vocab = Vocabulary::from_codes(h.at("vocabulary").get<std::vector<std::string>>());
  m.tasks.tasks = h.at("tasks").get<std::vector<std::string>>();
  for (const auto& e : h.at("task_entropies"))
    m.tasks.entropies.push_back(e.is_null() ? std::numeric_limits<double>::quiet_NaN() : e.get<double>());
  for (const auto& e : h.at("excluded")) m.tasks.excluded.insert(e.get<std::string>());
  m.loss_normalization = h.at("loss_normalization").get<std::string>();

  const json& hd = h.at("head");
  const std::size_t d = m.encoder_config.inner_dim;
  m.params.encoder = EncoderParams<float>::zeros(m.encoder_config);
  m.params.head = HeadParams<float>::zeros(d, hd.at("num_time_pieces"), hd.at("survival_dim"), hd.at("tasks"));
  m.params.next_code.resize(m.objective == Objective::next_code ? static_cast<Eigen::Index>(m.tasks.size()) : 0,
                            static_cast<Eigen::Index>(d));

  std::map<std::string, const json*> table;
  for (const json& t : h.at("tensors")) table[t.at("name").get<std::string>()] = &t;
  auto fill = [&](const std::string& name, Matrix<float>& dst) {
    auto it = table.find(name);
    if (it == table.end()) throw DataError("checkpoint lacks tensor " + name);
    const json& t = *it->second;
    const auto rows = t.at("shape")[0].get<Eigen::Index>(), cols = t.at("shape")[1].get<Eigen::Index>();
    if (rows != dst.rows() || cols != dst.cols()) throw DataError("tensor " + name + " has an unexpected shape");
    const auto off = t.at("offset").get<std::uint64_t>(), bytes = t.at("bytes").get<std::uint64_t>();
    if (bytes != static_cast<std::uint64_t>(dst.size()) * sizeof(float) || off + bytes > blob.size())
      throw DataError("tensor " + name + " lies outside the checkpoint");
    std::memcpy(dst.data(), blob.data() + off, bytes);
  };
  m.params.visit(fill);
  if (h.contains("train_state")) {
    const json& s = h.at("train_state");
    TrainState st;
    st.step = s.at("step");
    st.epoch = s.at("epoch");
    st.total_steps = s.at("total_steps");
    st.best_epoch = s.at("best_epoch");
    st.epochs_since_best = s.at("epochs_since_best");
    st.best_validation_loss =
        s.at("best_validation_loss").is_null() ? std::numeric_limits<double>::infinity() : s.at("best_validation_loss").get<double>();
    st.rng = rng_from_state(s.at("rng").get<std::string>());
    st.adam_m = m.params.zeros_like();
    st.adam_v = m.params.zeros_like();
    st.adam_m.visit([&](const std::string& n, Matrix<float>& x) { fill("adam_m/" + n, x); });
    st.adam_v.visit([&](const std::string& n, Matrix<float>& x) { fill("adam_v/" + n, x); });
    ck.state = std::move(st);
  }
  ck.extra_json = h.value("extra", json::object()).dump();
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainState* state,
                     const std::string& extra_json) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_checkpoint(out, model, state, extra_json);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

Matrix<float> representations(const Model& model, const EmbeddedSequence& sequence) {
  const Encoder<float> enc(model.encoder_config);
  return enc.forward(model.params.encoder, sequence, Mode::eval);
}

}  // namespace tte
