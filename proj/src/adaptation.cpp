#include "tte/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "parallel.hpp"
#include "tte/random.hpp"

namespace tte {

using json = nlohmann::ordered_json;

std::string_view to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::probe: return "probe";
    case AdaptMode::finetune: return "finetune";
    case AdaptMode::scratch: return "scratch";
  }
  return "probe";
}

AdaptMode parse_adapt_mode(std::string_view s) {
  if (s == "probe") return AdaptMode::probe;
  if (s == "finetune") return AdaptMode::finetune;
  if (s == "scratch") return AdaptMode::scratch;
  throw ConfigError("unknown adaptation mode '" + std::string(s) + "'");
}

namespace {

json definition_json(const TaskDefinition& t) {
  return {{"name", t.name},
          {"target_codes", t.target_codes},
          {"min_history_days", t.min_history_days},
          {"seed", t.seed}};
}

TaskDefinition definition_from(const json& j) {
  TaskDefinition t;
  t.name = j.at("name").get<std::string>();
  t.target_codes = j.at("target_codes").get<std::vector<std::string>>();
  t.min_history_days = j.value("min_history_days", 365.0);
  t.seed = j.value("seed", std::uint64_t{1});
  if (t.name.empty()) throw ConfigError("task definition needs a name");
  if (t.target_codes.empty()) throw ConfigError("task " + t.name + " has no target codes");
  if (!(t.min_history_days >= 0.0)) throw ConfigError("min_history_days must be non-negative");
  return t;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string TaskDefinition::to_json() const { return definition_json(*this).dump(2); }

TaskDefinition TaskDefinition::from_json(const std::string& text) {
  try {
    return definition_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("task definition: ") + e.what());
  }
}

TaskDefinition TaskDefinition::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open task definition " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<Observation> TargetTask::observations() const {
  std::vector<Observation> out;
  out.reserve(samples.size());
  for (const TaskSample& s : samples) out.push_back({s.time, s.event});
  return out;
}

std::size_t TargetTask::events() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.event; }));
}

TargetTask make_task_labels(std::span<const EventTimeline> timelines, const TaskDefinition& task,
                            const Ontology* ontology) {
  const std::set<std::string> targets(task.target_codes.begin(), task.target_codes.end());
  std::map<std::string, bool> cache;
  auto is_target = [&](const std::string& code) {
    auto it = cache.find(code);
    if (it != cache.end()) return it->second;
    bool hit = targets.count(code) != 0;
    if (!hit && ontology && ontology->contains(code))
      for (const std::string& a : ontology->ancestors(code)) hit |= targets.count(a) != 0;
    cache.emplace(code, hit);
    return hit;
  };

  TargetTask out;
  out.name = task.name;
  for (std::size_t i = 0; i < timelines.size(); ++i) {
    const EventTimeline& tl = timelines[i];
    if (tl.events.empty()) {
      ++out.skipped;
      continue;
    }
    const double earliest = tl.events.front().time + task.min_history_days;
    const double censor = tl.censor_time();
    std::vector<double> candidates;
    for (const Event& e : tl.events)
      if (e.kind == EventKind::visit_end && e.time >= earliest && e.time < censor) candidates.push_back(e.time);
    if (candidates.empty()) {
      ++out.skipped;
      continue;
    }
    std::mt19937_64 rng(splitmix64(task.seed ^ xxhash64(tl.patient_id)));
    const double pred = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];

    bool before = false;
    std::optional<double> first_after;
    for (const Event& e : tl.events) {
      if (!is_target(e.code)) continue;
      if (e.time <= pred) {
        before = true;
        break;
      }
      if (e.time <= censor) first_after = e.time;
      break;
    }
    if (before) {
      ++out.excluded;
      continue;
    }
    const auto last = std::upper_bound(tl.events.begin(), tl.events.end(), pred,
                                       [](double t, const Event& e) { return t < e.time; });
    TaskSample s;
    s.patient = i;
    s.position = static_cast<std::size_t>(last - tl.events.begin()) - 1;
    s.prediction_time = pred;
    s.event = first_after.has_value();
    s.time = (first_after ? *first_after : censor) - pred;
    out.samples.push_back(s);
  }
  return out;
}

TargetTask label_fraction(const TargetTask& task, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("label fraction must be in (0, 1]");
  TargetTask out = task;
  const std::size_t n = task.samples.size();
  if (n == 0 || fraction == 1.0) return out;
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(splitmix64(seed));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  out.samples.clear();
  for (std::size_t i : idx) out.samples.push_back(task.samples[i]);
  return out;
}

std::vector<PatientExample> task_examples(std::span<const EventTimeline> timelines, const TargetTask& task,
                                          const Vocabulary& vocab, std::size_t max_sequence, const PieceGrid& grid) {
  std::vector<PatientExample> out;
  out.reserve(task.samples.size());
  for (std::size_t i = 0; i < task.samples.size(); ++i) {
    const TaskSample& s = task.samples[i];
    const EventTimeline& tl = timelines[s.patient];
    EventTimeline prefix;
    prefix.patient_id = tl.patient_id;
    prefix.birth_time = tl.birth_time;
    prefix.events.assign(tl.events.begin(), tl.events.begin() + static_cast<std::ptrdiff_t>(s.position + 1));
    PatientExample ex;
    ex.patient = static_cast<std::uint32_t>(i);
    ex.sequence = embed_sequence(prefix, vocab, max_sequence);
    ex.labels = SurvivalBatch(1, grid);
    std::vector<std::pair<std::uint32_t, double>> hit;
    if (s.event) hit.emplace_back(0, s.time);
    ex.labels.add_row_sparse({ex.patient, static_cast<std::uint32_t>(s.position)}, s.time, std::move(hit));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<double> TaskModel::beta() const {
  const auto& e = model.params.head.task_embeddings;
  std::vector<double> b;
  for (Eigen::Index i = 0; i < e.cols(); ++i) b.push_back(e(0, i));
  return b;
}

// ---------------------------------------------------------------------------

namespace {

Eigen::Index prediction_row(const PatientExample& ex) {
  return static_cast<Eigen::Index>(ex.labels.refs().at(0).position - ex.sequence.dropped);
}

double mean_nll(const ProbeFeatures& f, const Eigen::VectorXd& beta) {
  const auto b = static_cast<Eigen::Index>(f.survival_dim());
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.states.rows(); ++i)
    for (Eigen::Index p = 0; p < f.exposure.cols(); ++p) {
      const double z = f.states.row(i).segment(p * b, b).dot(beta);
      s += std::exp(z) * f.exposure(i, p) - f.events(i, p) * z;
    }
  return s / static_cast<double>(std::max<Eigen::Index>(f.states.rows(), 1));
}

}  // namespace

ProbeFeatures probe_features(const Model& base, std::span<const PatientExample> examples, std::size_t threads) {
  const Encoder<float> enc(base.encoder_config);
  const HeadParams<float>& head = base.params.head;
  const auto P = static_cast<Eigen::Index>(base.grid.size());
  const auto n = static_cast<Eigen::Index>(examples.size());
  ProbeFeatures f;
  f.states.resize(n, P * static_cast<Eigen::Index>(head.survival_dim()));
  f.exposure = Eigen::MatrixXd::Zero(n, P);
  f.events = Eigen::MatrixXd::Zero(n, P);
  detail::parallel_for(examples.size(), threads, [&](std::size_t i) {
    const PatientExample& ex = examples[i];
    const Matrix<float> R = enc.forward(base.params.encoder, ex.sequence, Mode::eval);
    const Matrix<float> row = R.row(prediction_row(ex));
    f.states.row(static_cast<Eigen::Index>(i)) = project_states(head, row).cast<double>();
  });
  for (Eigen::Index i = 0; i < n; ++i) {
    const SurvivalBatch& b = examples[static_cast<std::size_t>(i)].labels;
    for (Eigen::Index p = 0; p < P; ++p) f.exposure(i, p) = b.default_exposure(0, static_cast<std::size_t>(p));
    for (const EventEntry& e : b.events()) {
      f.exposure(i, e.piece) = e.time;
      f.events(i, e.piece) = 1.0;
      for (Eigen::Index q = e.piece + 1; q < P; ++q) f.exposure(i, q) = 0.0;
    }
  }
  return f;
}

ProbeFit fit_probe(const ProbeFeatures& f, double l2, std::size_t max_iterations) {
  const auto b = static_cast<Eigen::Index>(f.survival_dim());
  const Eigen::Index n = f.states.rows(), P = f.exposure.cols();
  if (n == 0) throw DataError("probe needs at least one labeled sample");
  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(b, l2);
  penalty(b - 1) = 0.0;

  auto objective = [&](const Eigen::VectorXd& beta) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index p = 0; p < P; ++p) {
        const double u = f.exposure(i, p), d = f.events(i, p);
        if (u == 0.0 && d == 0.0) continue;
        const double z = f.states.row(i).segment(p * b, b).dot(beta);
        s += std::exp(z) * u - d * z;
      }
    return s * inv_n + 0.5 * beta.cwiseProduct(penalty).dot(beta);
  };

  ProbeFit fit;
  fit.beta = Eigen::VectorXd::Zero(b);
  const double ev = f.events.sum(), ex = f.exposure.sum();
  fit.beta(b - 1) = std::log((ev + 0.5) / std::max(ex, 1e-12));
  fit.objective = objective(fit.beta);
  for (; fit.iterations < max_iterations; ++fit.iterations) {
    Eigen::VectorXd g = penalty.cwiseProduct(fit.beta);
    Eigen::MatrixXd H = penalty.asDiagonal();
    Eigen::VectorXd gs = Eigen::VectorXd::Zero(b);
    Eigen::MatrixXd Hs = Eigen::MatrixXd::Zero(b, b);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index p = 0; p < P; ++p) {
        const double u = f.exposure(i, p), d = f.events(i, p);
        if (u == 0.0 && d == 0.0) continue;
        const auto m = f.states.row(i).segment(p * b, b).transpose();
        const double lam = std::exp(m.dot(fit.beta));
        gs.noalias() += (lam * u - d) * m;
        Hs.selfadjointView<Eigen::Lower>().rankUpdate(m, lam * u);
      }
    g += gs * inv_n;
    H += Hs.selfadjointView<Eigen::Lower>().toDenseMatrix() * inv_n;
    if (g.lpNorm<Eigen::Infinity>() < 1e-10) {
      fit.converged = true;
      break;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    Eigen::VectorXd step = ldlt.solve(g);
    if (ldlt.info() != Eigen::Success || !step.allFinite() || step.dot(g) <= 0.0) {
      const double jitter = 1e-8 * std::max(1.0, H.diagonal().maxCoeff());
      step = (H + jitter * Eigen::MatrixXd::Identity(b, b)).ldlt().solve(g);
    }
    double t = 1.0, next = objective(fit.beta - step);
    for (int k = 0; k < 40 && !(next <= fit.objective); ++k) {
      t *= 0.5;
      next = objective(fit.beta - t * step);
    }
    if (!(next <= fit.objective)) {
      fit.converged = true;  // no further descent at double precision
      break;
    }
    fit.beta -= t * step;
    const double gain = fit.objective - next;
    fit.objective = next;
    if (gain <= 1e-15 * std::max(1.0, std::abs(next))) {
      fit.converged = true;
      ++fit.iterations;
      break;
    }
  }
  return fit;
}

Model single_task_model(const Model& base, const std::string& name, const Eigen::VectorXd& beta) {
  Model m = base;
  m.objective = Objective::tte;
  m.tasks = TaskSet{};
  m.tasks.tasks = {name};
  m.tasks.entropies = {0.0};
  m.params.next_code.resize(0, static_cast<Eigen::Index>(base.encoder_config.inner_dim));
  if (beta.size() != static_cast<Eigen::Index>(base.params.head.survival_dim()))
    throw std::invalid_argument("task vector width does not match the head");
  m.params.head.task_embeddings = beta.transpose().cast<float>();
  return m;
}

std::vector<PiecewiseHazard> predict(const Model& model, std::span<const PatientExample> examples,
                                     std::size_t threads) {
  const Encoder<float> enc(model.encoder_config);
  std::vector<PiecewiseHazard> out(examples.size());
  detail::parallel_for(examples.size(), threads, [&](std::size_t i) {
    const Matrix<float> R = enc.forward(model.params.encoder, examples[i].sequence, Mode::eval);
    const Matrix<float> row = R.row(prediction_row(examples[i]));
    out[i] = predict_curve(project_states(model.params.head, row), 0, model.params.head.task_embeddings, 0, model.grid);
  });
  return out;
}

double task_nll(const Model& model, std::span<const PatientExample> examples, std::size_t threads) {
  const Encoder<float> enc(model.encoder_config);
  std::vector<LossSum> losses(examples.size());
  detail::parallel_for(examples.size(), threads, [&](std::size_t i) {
    losses[i] = example_loss<float>(Objective::tte, enc, model.params, examples[i], Mode::eval, nullptr, nullptr);
  });
  double loss = 0.0;
  std::size_t count = 0;
  for (const LossSum& l : losses) {
    loss += l.loss;
    count += l.count;
  }
  return count ? loss / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

TaskModel linear_probe(const Model& base, const TaskDefinition& task, std::span<const PatientExample> train,
                       std::span<const PatientExample> validation, const AdaptConfig& cfg) {
  if (cfg.l2_grid.empty()) throw ConfigError("l2 grid is empty");
  const ProbeFeatures ft = probe_features(base, train, cfg.threads);
  const bool has_val = !validation.empty();
  const ProbeFeatures fv = has_val ? probe_features(base, validation, cfg.threads) : ProbeFeatures{};

  std::optional<ProbeFit> best;
  double best_val = std::numeric_limits<double>::infinity(), best_l2 = cfg.l2_grid.front();
  for (double l2 : cfg.l2_grid) {
    ProbeFit fit = fit_probe(ft, l2, cfg.newton_iterations);
    const double score = has_val ? mean_nll(fv, fit.beta) : fit.objective;
    if (!best || score < best_val) {
      best = std::move(fit);
      best_val = score;
      best_l2 = l2;
    }
  }

  TaskModel out;
  out.task = task;
  out.mode = AdaptMode::probe;
  out.model = single_task_model(base, task.name, best->beta);
  out.l2 = best_l2;
  out.validation_nll = has_val ? task_nll(out.model, validation, cfg.threads) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

namespace {

// Epoch loop with early stopping on validation NLL. The starting point counts as epoch 0.
void train_task(TaskModel& tm, const TrainConfig& train, std::span<const PatientExample> examples,
                std::span<const PatientExample> validation, std::size_t threads) {
  TrainConfig cfg = train;
  cfg.threads = threads;
  cfg.validate();
  const std::span<const PatientExample> val = validation.empty() ? examples : validation;
  const std::size_t per_epoch = (examples.size() + cfg.batch_patients - 1) / cfg.batch_patients;
  Trainer trainer(tm.model, cfg, per_epoch * cfg.max_epochs);
  double best = trainer.evaluate(val);
  tm.validation_nll = best;
  tm.log.push_back({0, 0, 0.0, std::numeric_limits<double>::quiet_NaN(), best});
  std::size_t since = 0;
  std::vector<std::size_t> order(examples.size());
  std::vector<const PatientExample*> batch;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    trainer.state().epoch = epoch;
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), trainer.state().rng);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_patients) {
      batch.clear();
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_patients); ++i)
        batch.push_back(&examples[order[i]]);
      LossRecord rec;
      rec.step = trainer.state().step;
      rec.epoch = epoch;
      rec.learning_rate = learning_rate_at(cfg, rec.step, trainer.state().total_steps);
      rec.train_loss = trainer.step(batch);
      tm.log.push_back(rec);
    }
    const double v = trainer.evaluate(val);
    tm.log.back().validation_loss = v;
    if (!std::isfinite(v))
      throw NumericalError("adaptation diverged at epoch " + std::to_string(epoch) + " (validation loss " +
                           std::to_string(v) + ")");
    if (v < best) {
      best = v;
      since = 0;
      tm.model = trainer.model();
      tm.validation_nll = v;
    } else if (++since >= cfg.patience) {
      break;
    }
  }
}

}  // namespace

TaskModel finetune(const Model& base, const TaskDefinition& task, std::span<const PatientExample> train,
                   std::span<const PatientExample> validation, const AdaptConfig& cfg) {
  TaskModel tm = linear_probe(base, task, train, validation, cfg);
  tm.mode = AdaptMode::finetune;
  train_task(tm, cfg.finetune, train, validation, cfg.threads);
  return tm;
}

TaskModel train_scratch(const EncoderConfig& encoder, const HeadConfig& head, const Vocabulary& vocab,
                        const PieceGrid& grid, const TaskDefinition& task, std::span<const PatientExample> train,
                        std::span<const PatientExample> validation, const AdaptConfig& cfg) {
  if (train.empty()) throw DataError("no training samples for task " + task.name);
  TaskSet ts;
  ts.tasks = {task.name};
  ts.entropies = {0.0};
  std::mt19937_64 rng(cfg.scratch.seed);
  TaskModel tm;
  tm.task = task;
  tm.mode = AdaptMode::scratch;
  tm.model = init_model(Objective::tte, encoder, head, vocab, grid, ts, rng);
  SurvivalBatch all(1, grid);
  for (const PatientExample& ex : train) all.append(ex.labels);
  tm.model.params.head.init_task_bias(all);
  train_task(tm, cfg.scratch, train, validation, cfg.threads);
  return tm;
}

// ---------------------------------------------------------------------------

void save_task_model(const std::filesystem::path& path, const TaskModel& tm) {
  const std::vector<double> beta = tm.beta();
  json t;
  t["definition"] = definition_json(tm.task);
  t["mode"] = to_string(tm.mode);
  t["base_checkpoint"] = tm.base_checkpoint;
  t["l2"] = tm.l2;
  t["validation_nll"] = finite_or_null(tm.validation_nll);
  t["beta"] = std::vector<double>(beta.begin(), beta.end() - 1);
  t["bias"] = beta.back();
  json extra;
  extra["task"] = t;
  save_checkpoint(path, tm.model, nullptr, extra.dump());
}

TaskModel load_task_model(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  const json extra = json::parse(ck.extra_json);
  if (!extra.contains("task")) throw DataError(path.string() + " is not a task model");
  const json& t = extra.at("task");
  TaskModel tm;
  tm.task = definition_from(t.at("definition"));
  tm.mode = parse_adapt_mode(t.at("mode").get<std::string>());
  tm.base_checkpoint = t.at("base_checkpoint").get<std::string>();
  tm.l2 = t.at("l2").get<double>();
  tm.validation_nll = t.at("validation_nll").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                       : t.at("validation_nll").get<double>();
  tm.model = std::move(ck.model);
  if (tm.model.params.head.tasks() != 1) throw DataError(path.string() + ": task model must have one task");
  return tm;
}

}  // namespace tte
