#include "tte/survival_head.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <stdexcept>

#include "tte/metrics.hpp"

namespace tte {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

PieceGrid fit_pieces(std::vector<double> event_times, std::size_t pieces) {
  if (pieces == 0) throw std::invalid_argument("need at least one piece");
  const std::set<double> distinct(event_times.begin(), event_times.end());
  if (distinct.size() < pieces)
    throw std::invalid_argument("only " + std::to_string(distinct.size()) + " distinct event times for " +
                                std::to_string(pieces) + " pieces");
  std::vector<double> starts{0.0};
  for (std::size_t p = 1; p < pieces; ++p) {
    const double b = quantile(event_times, static_cast<double>(p) / static_cast<double>(pieces));
    if (!(b > starts.back())) throw std::invalid_argument("event time quantiles do not separate the pieces");
    starts.push_back(b);
  }
  return PieceGrid(std::move(starts));
}

// ---------------------------------------------------------------------------

void SurvivalBatch::add_row(RowRef ref, double censor_after, std::span<const std::optional<double>> event_times) {
  if (event_times.size() != tasks_) throw std::invalid_argument("one event time per task required");
  std::vector<std::pair<std::uint32_t, double>> sparse;
  for (std::size_t k = 0; k < event_times.size(); ++k)
    if (event_times[k]) sparse.emplace_back(static_cast<std::uint32_t>(k), *event_times[k]);
  add_row_sparse(ref, censor_after, std::move(sparse));
}

void SurvivalBatch::add_row_sparse(RowRef ref, double censor_after,
                                   std::vector<std::pair<std::uint32_t, double>> task_events) {
  const auto row = static_cast<std::uint32_t>(refs_.size());
  const std::size_t P = pieces();
  for (std::size_t p = 0; p < P; ++p) u0_.push_back(static_cast<float>(grid_.exposure(p, censor_after)));
  std::sort(task_events.begin(), task_events.end());

  std::vector<EventEntry> entries;
  for (const auto& [k, t] : task_events) {
    if (k >= tasks_) throw std::out_of_range("task index out of range");
    if (t < 0.0 || t > censor_after) throw std::invalid_argument("event time outside the observation window");
    const std::size_t p = grid_.piece_of(t);
    entries.push_back({row, k, static_cast<std::uint32_t>(p), static_cast<float>(t - grid_.start(p))});
    bool later_exposure = false;
    for (std::size_t q = p + 1; q < P; ++q) later_exposure |= u0_[row * P + q] > 0.0f;
    if (later_exposure) overrides_.push_back({row, k, static_cast<std::uint32_t>(p + 1)});
  }
  std::sort(entries.begin(), entries.end(), [](const EventEntry& a, const EventEntry& b) {
    return a.piece != b.piece ? a.piece < b.piece : a.task < b.task;
  });
  events_.insert(events_.end(), entries.begin(), entries.end());
  event_offsets_.push_back(static_cast<std::uint32_t>(events_.size()));
  override_offsets_.push_back(static_cast<std::uint32_t>(overrides_.size()));
  refs_.push_back(ref);
}

void SurvivalBatch::append(const SurvivalBatch& other, std::uint32_t patient_offset) {
  if (rows() == 0 && tasks_ == 0) {
    tasks_ = other.tasks_;
    grid_ = other.grid_;
  }
  if (other.tasks_ != tasks_ || !(other.grid_ == grid_)) throw std::invalid_argument("incompatible batches");
  const auto base = static_cast<std::uint32_t>(rows());
  u0_.insert(u0_.end(), other.u0_.begin(), other.u0_.end());
  for (EventEntry e : other.events_) {
    e.row += base;
    events_.push_back(e);
  }
  for (CensorOverride o : other.overrides_) {
    o.row += base;
    overrides_.push_back(o);
  }
  const std::uint32_t ebase = event_offsets_.back(), obase = override_offsets_.back();
  for (std::size_t r = 1; r < other.event_offsets_.size(); ++r) {
    event_offsets_.push_back(ebase + other.event_offsets_[r]);
    override_offsets_.push_back(obase + other.override_offsets_[r]);
  }
  for (RowRef ref : other.refs_) refs_.push_back({ref.patient + patient_offset, ref.position});
}

SurvivalBatch SurvivalBatch::slice_rows(std::size_t begin, std::size_t end) const {
  SurvivalBatch out(tasks_, grid_);
  const std::size_t P = pieces();
  out.u0_.assign(u0_.begin() + static_cast<std::ptrdiff_t>(begin * P),
                 u0_.begin() + static_cast<std::ptrdiff_t>(end * P));
  for (std::size_t r = begin; r < end; ++r) {
    const auto row = static_cast<std::uint32_t>(r - begin);
    for (std::size_t i = event_offsets_[r]; i < event_offsets_[r + 1]; ++i) {
      EventEntry e = events_[i];
      e.row = row;
      out.events_.push_back(e);
    }
    for (std::size_t i = override_offsets_[r]; i < override_offsets_[r + 1]; ++i) {
      CensorOverride o = overrides_[i];
      o.row = row;
      out.overrides_.push_back(o);
    }
    out.event_offsets_.push_back(static_cast<std::uint32_t>(out.events_.size()));
    out.override_offsets_.push_back(static_cast<std::uint32_t>(out.overrides_.size()));
    out.refs_.push_back(refs_[r]);
  }
  return out;
}

std::pair<std::size_t, std::size_t> SurvivalBatch::event_range(std::size_t row) const {
  return {event_offsets_[row], event_offsets_[row + 1]};
}

std::pair<std::size_t, std::size_t> SurvivalBatch::override_range(std::size_t row) const {
  return {override_offsets_[row], override_offsets_[row + 1]};
}

namespace {

constexpr char kBatchMagic[8] = {'T', 'T', 'E', 'S', 'U', 'R', 'V', '1'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated survival batch");
  return v;
}

}  // namespace

void SurvivalBatch::write_binary(std::ostream& out) const {
  out.write(kBatchMagic, sizeof(kBatchMagic));
  put<std::uint64_t>(out, rows());
  put<std::uint64_t>(out, tasks_);
  put<std::uint64_t>(out, pieces());
  for (double s : grid_.starts()) put<double>(out, s);
  for (float u : u0_) put<float>(out, u);
  put<std::uint64_t>(out, events_.size());
  for (const EventEntry& e : events_) {
    put(out, e.row);
    put(out, e.task);
    put(out, e.piece);
    put(out, e.time);
  }
  put<std::uint64_t>(out, overrides_.size());
  for (const CensorOverride& o : overrides_) {
    put(out, o.row);
    put(out, o.task);
    put(out, o.first_piece);
  }
  for (const RowRef& r : refs_) {
    put(out, r.patient);
    put(out, r.position);
  }
}

SurvivalBatch SurvivalBatch::read_binary(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kBatchMagic, 8) != 0) throw DataError("not a survival batch file");
  const auto rows = get<std::uint64_t>(in);
  const auto tasks = get<std::uint64_t>(in);
  const auto pieces = get<std::uint64_t>(in);
  std::vector<double> starts(pieces);
  for (double& s : starts) s = get<double>(in);
  SurvivalBatch b(tasks, PieceGrid(std::move(starts)));
  b.u0_.resize(rows * pieces);
  for (float& u : b.u0_) u = get<float>(in);
  const auto n_events = get<std::uint64_t>(in);
  b.events_.resize(n_events);
  for (EventEntry& e : b.events_) {
    e.row = get<std::uint32_t>(in);
    e.task = get<std::uint32_t>(in);
    e.piece = get<std::uint32_t>(in);
    e.time = get<float>(in);
  }
  const auto n_over = get<std::uint64_t>(in);
  b.overrides_.resize(n_over);
  for (CensorOverride& o : b.overrides_) {
    o.row = get<std::uint32_t>(in);
    o.task = get<std::uint32_t>(in);
    o.first_piece = get<std::uint32_t>(in);
  }
  b.refs_.resize(rows);
  for (RowRef& r : b.refs_) {
    r.patient = get<std::uint32_t>(in);
    r.position = get<std::uint32_t>(in);
  }
  std::size_t ei = 0, oi = 0;
  for (std::uint64_t r = 0; r < rows; ++r) {
    while (ei < b.events_.size() && b.events_[ei].row == r) ++ei;
    while (oi < b.overrides_.size() && b.overrides_[oi].row == r) ++oi;
    b.event_offsets_.push_back(static_cast<std::uint32_t>(ei));
    b.override_offsets_.push_back(static_cast<std::uint32_t>(oi));
  }
  if (ei != b.events_.size() || oi != b.overrides_.size()) throw DataError("survival batch entries out of order");
  return b;
}

// ---------------------------------------------------------------------------

TaskMatcher::TaskMatcher(const TaskSet& tasks, const Ontology* ontology)
    : tasks_(tasks.size()), ontology_(ontology) {
  for (std::size_t k = 0; k < tasks.size(); ++k) index_.emplace(tasks.tasks[k], static_cast<std::uint32_t>(k));
}

const std::vector<std::uint32_t>& TaskMatcher::match(const std::string& code) const {
  auto it = cache_.find(code);
  if (it != cache_.end()) return it->second;
  std::vector<std::uint32_t> out;
  auto self = index_.find(code);
  if (self != index_.end()) out.push_back(self->second);
  if (ontology_) {
    for (const std::string& a : ontology_->ancestors(code)) {
      auto hit = index_.find(a);
      if (hit != index_.end()) out.push_back(hit->second);
    }
  }
  std::sort(out.begin(), out.end());
  return cache_.emplace(code, std::move(out)).first->second;
}

SurvivalBatch build_labels(const EventTimeline& timeline, std::uint32_t patient, const TaskMatcher& matcher,
                           const PieceGrid& grid, LabelStats* stats) {
  std::vector<std::size_t> all(timeline.events.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return build_labels(timeline, patient, matcher, grid, all, stats);
}

SurvivalBatch build_labels(const EventTimeline& timeline, std::uint32_t patient, const TaskMatcher& matcher,
                           const PieceGrid& grid, std::span<const std::size_t> positions, LabelStats* stats) {
  SurvivalBatch batch(matcher.tasks(), grid);
  const double end = timeline.censor_time();
  std::vector<std::vector<double>> occurrences(matcher.tasks());
  for (const Event& e : timeline.events)
    for (std::uint32_t k : matcher.match(e.code)) occurrences[k].push_back(e.time);

  LabelStats local;
  std::vector<std::pair<std::uint32_t, double>> hits;
  for (std::size_t pos : positions) {
    const double t = timeline.events.at(pos).time;
    if (t >= end) {
      ++local.skipped_after_censor;
      continue;
    }
    hits.clear();
    for (std::uint32_t k = 0; k < occurrences.size(); ++k) {
      const auto& occ = occurrences[k];
      auto next = std::upper_bound(occ.begin(), occ.end(), t);
      if (next != occ.end() && *next <= end) hits.emplace_back(k, *next - t);
    }
    batch.add_row_sparse({patient, static_cast<std::uint32_t>(pos)}, end - t, hits);
    ++local.rows;
  }
  if (stats) {
    stats->rows += local.rows;
    stats->skipped_after_censor += local.skipped_after_censor;
  }
  return batch;
}

MemoryReport memory_report(const SurvivalBatch& batch) {
  MemoryReport r;
  r.sparse_bytes = batch.default_exposures().size() * sizeof(float) + batch.events().size() * sizeof(EventEntry) +
                   batch.overrides().size() * sizeof(CensorOverride) + 2 * (batch.rows() + 1) * sizeof(std::uint32_t);
  r.dense_bytes = 2 * batch.rows() * batch.tasks() * batch.pieces() * sizeof(float);
  r.ratio = r.dense_bytes ? static_cast<double>(r.sparse_bytes) / static_cast<double>(r.dense_bytes) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
HeadParams<Scalar> HeadParams<Scalar>::zeros(std::size_t inner_dim, std::size_t pieces, std::size_t survival_dim,
                                             std::size_t tasks) {
  if (survival_dim < 2) throw ConfigError("survival_dim must be at least 2");
  if (pieces < 1) throw ConfigError("need at least one piece");
  HeadParams h;
  const auto cols = static_cast<Eigen::Index>(pieces * (survival_dim - 1));
  h.time_projection = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(inner_dim), cols);
  h.projection_bias = Matrix<Scalar>::Zero(1, cols);
  h.task_embeddings =
      Matrix<Scalar>::Zero(static_cast<Eigen::Index>(tasks), static_cast<Eigen::Index>(survival_dim));
  return h;
}

template <typename Scalar>
HeadParams<Scalar> HeadParams<Scalar>::init(std::size_t inner_dim, std::size_t pieces, std::size_t survival_dim,
                                            std::size_t tasks, std::mt19937_64& rng) {
  HeadParams h = zeros(inner_dim, pieces, survival_dim, tasks);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (Eigen::Index i = 0; i < h.time_projection.size(); ++i)
    h.time_projection.data()[i] = static_cast<Scalar>(normal(rng));
  for (Eigen::Index i = 0; i < h.task_embeddings.size(); ++i)
    h.task_embeddings.data()[i] = static_cast<Scalar>(normal(rng));
  return h;
}

template <typename Scalar>
void HeadParams<Scalar>::init_task_bias(const SurvivalBatch& batch) {
  const std::size_t K = tasks();
  const std::size_t P = batch.pieces();
  double shared = 0.0;
  for (float u : batch.default_exposures()) shared += u;
  std::vector<double> exposure(K, shared), events(K, 0.0);
  for (const EventEntry& e : batch.events()) {
    events[e.task] += 1.0;
    exposure[e.task] += e.time - batch.default_exposure(e.row, e.piece);
  }
  for (const CensorOverride& o : batch.overrides())
    for (std::size_t p = o.first_piece; p < P; ++p) exposure[o.task] -= batch.default_exposure(o.row, p);
  const auto last = task_embeddings.cols() - 1;
  for (std::size_t k = 0; k < K; ++k) {
    const double rate = exposure[k] > 0.0 ? (events[k] + 0.5) / exposure[k] : 1.0;
    task_embeddings(static_cast<Eigen::Index>(k), last) = static_cast<Scalar>(std::log(rate));
  }
}

template struct HeadParams<float>;
template struct HeadParams<double>;

template <typename Scalar>
Matrix<Scalar> project_states(const HeadParams<Scalar>& head, const Matrix<Scalar>& repr) {
  const auto b = static_cast<Eigen::Index>(head.survival_dim());
  const auto P = static_cast<Eigen::Index>(head.pieces());
  const Matrix<Scalar> z = (repr * head.time_projection).rowwise() + head.projection_bias.row(0);
  Matrix<Scalar> m(repr.rows(), P * b);
  for (Eigen::Index p = 0; p < P; ++p) {
    m.block(0, p * b, repr.rows(), b - 1) = z.block(0, p * (b - 1), repr.rows(), b - 1);
    m.col(p * b + b - 1).setOnes();
  }
  return m;
}

template <typename Scalar>
Matrix<Scalar> project_states_backward(const HeadParams<Scalar>& head, const Matrix<Scalar>& repr,
                                       const Matrix<Scalar>& grad_states, HeadParams<Scalar>& grads) {
  const auto b = static_cast<Eigen::Index>(head.survival_dim());
  const auto P = static_cast<Eigen::Index>(head.pieces());
  Matrix<Scalar> dz(repr.rows(), P * (b - 1));
  for (Eigen::Index p = 0; p < P; ++p) dz.block(0, p * (b - 1), repr.rows(), b - 1) = grad_states.block(0, p * b, repr.rows(), b - 1);
  grads.time_projection.noalias() += repr.transpose() * dz;
  grads.projection_bias += dz.colwise().sum();
  return dz * head.time_projection.transpose();
}

template Matrix<float> project_states(const HeadParams<float>&, const Matrix<float>&);
template Matrix<double> project_states(const HeadParams<double>&, const Matrix<double>&);
template Matrix<float> project_states_backward(const HeadParams<float>&, const Matrix<float>&, const Matrix<float>&,
                                               HeadParams<float>&);
template Matrix<double> project_states_backward(const HeadParams<double>&, const Matrix<double>&,
                                                const Matrix<double>&, HeadParams<double>&);

// ---------------------------------------------------------------------------

template <typename Scalar>
NllResult<Scalar> fused_nll(const Matrix<Scalar>& states, const Matrix<Scalar>& task_embeddings,
                            const SurvivalBatch& batch, std::size_t block_size) {
  const std::size_t n = batch.rows();
  const std::size_t P = batch.pieces();
  const std::size_t K = batch.tasks();
  const auto b = task_embeddings.cols();
  if (static_cast<std::size_t>(states.rows()) != n || static_cast<std::size_t>(states.cols()) != P * b ||
      static_cast<std::size_t>(task_embeddings.rows()) != K)
    throw std::invalid_argument("fused_nll: inconsistent shapes");
  if (block_size == 0) block_size = K ? K : 1;

  NllResult<Scalar> res;
  Eigen::MatrixXd d_states = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), P * b);
  Eigen::MatrixXd d_tasks = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), b);
  Eigen::VectorXd m(b), dm(b);
  std::vector<double> logit(block_size), lambda(block_size), grad(block_size), term(block_size);
  double loss = 0.0;

  for (std::size_t j = 0; j < n; ++j) {
    const auto [ev_begin, ev_end] = batch.event_range(j);
    const auto [ov_begin, ov_end] = batch.override_range(j);
    std::size_t ev = ev_begin;
    for (std::size_t p = 0; p < P; ++p) {
      const double u0 = batch.default_exposure(j, p);
      std::size_t ev_piece_end = ev;
      while (ev_piece_end < ev_end && batch.events()[ev_piece_end].piece == p) ++ev_piece_end;
      if (u0 == 0.0 && ev_piece_end == ev) continue;

      const auto col = static_cast<Eigen::Index>(p) * b;
      m = states.row(static_cast<Eigen::Index>(j)).segment(col, b).transpose().template cast<double>();
      dm.setZero();
      std::size_t ev_cursor = ev;
      for (std::size_t k0 = 0; k0 < K; k0 += block_size) {
        const std::size_t k1 = std::min(K, k0 + block_size);
        for (std::size_t k = k0; k < k1; ++k) {
          const double z = task_embeddings.row(static_cast<Eigen::Index>(k)).template cast<double>().dot(m.transpose());
          const double lam = std::exp(z);
          logit[k - k0] = z;
          lambda[k - k0] = lam;
          grad[k - k0] = lam * u0;
          term[k - k0] = lam * u0;
        }
        // Event corrections for tasks in this block.
        for (; ev_cursor < ev_piece_end && batch.events()[ev_cursor].task < k1; ++ev_cursor) {
          const EventEntry& e = batch.events()[ev_cursor];
          const std::size_t i = e.task - k0;
          term[i] += -logit[i] + lambda[i] * (static_cast<double>(e.time) - u0);
          grad[i] += -1.0 + lambda[i] * (static_cast<double>(e.time) - u0);
        }
        // Zero exposure after an earlier event.
        if (u0 != 0.0) {
          for (std::size_t o = ov_begin; o < ov_end; ++o) {
            const CensorOverride& ov = batch.overrides()[o];
            if (ov.task < k0 || ov.task >= k1 || ov.first_piece > p) continue;
            const std::size_t i = ov.task - k0;
            term[i] -= lambda[i] * u0;
            grad[i] -= lambda[i] * u0;
          }
        }
        for (std::size_t k = k0; k < k1; ++k) {
          const double g = grad[k - k0];
          loss += term[k - k0];
          if (!std::isfinite(lambda[k - k0]) && !res.overflow) {
            res.overflow = true;
            res.diagnostic = "hazard overflow at row " + std::to_string(j) + ", piece " + std::to_string(p) +
                             ", task " + std::to_string(k) + " (log hazard " + std::to_string(logit[k - k0]) + ")";
          }
          if (g == 0.0) continue;
          dm += g * task_embeddings.row(static_cast<Eigen::Index>(k)).transpose().template cast<double>();
          d_tasks.row(static_cast<Eigen::Index>(k)) += g * m.transpose();
        }
      }
      ev = ev_piece_end;
      d_states.row(static_cast<Eigen::Index>(j)).segment(col, b) = dm.transpose();
    }
  }
  res.loss = res.overflow ? std::numeric_limits<double>::infinity() : loss;
  res.grad_states = d_states.cast<Scalar>();
  res.grad_tasks = d_tasks.cast<Scalar>();
  return res;
}

template <typename Scalar>
NllResult<Scalar> dense_nll(const Matrix<Scalar>& states, const Matrix<Scalar>& task_embeddings,
                            const SurvivalBatch& batch) {
  const std::size_t n = batch.rows(), P = batch.pieces(), K = batch.tasks();
  const auto b = task_embeddings.cols();
  const std::size_t cells = n * K * P;
  std::vector<float> delta(cells, 0.0f), u(cells);
  auto at = [&](std::size_t j, std::size_t k, std::size_t p) { return (j * K + k) * P + p; };
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < P; ++p) u[at(j, k, p)] = batch.default_exposure(j, p);
  for (const CensorOverride& o : batch.overrides())
    for (std::size_t p = o.first_piece; p < P; ++p) u[at(o.row, o.task, p)] = 0.0f;
  for (const EventEntry& e : batch.events()) {
    delta[at(e.row, e.task, e.piece)] = 1.0f;
    u[at(e.row, e.task, e.piece)] = e.time;
  }

  NllResult<Scalar> res;
  res.grad_states = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(n), P * b);
  res.grad_tasks = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(K), b);
  double loss = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const auto col = static_cast<Eigen::Index>(p) * b;
    const Matrix<Scalar> mp = states.middleCols(col, b);
    const Matrix<Scalar> logits = mp * task_embeddings.transpose();  // n x K
    Matrix<Scalar> g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < K; ++k) {
        const double z = logits(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
        const double lam = std::exp(z);
        const double d = delta[at(j, k, p)], uu = u[at(j, k, p)];
        loss += lam * uu - d * z;
        g(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = static_cast<Scalar>(lam * uu - d);
      }
    res.grad_states.middleCols(col, b) = g * task_embeddings;
    res.grad_tasks += g.transpose() * mp;
  }
  res.loss = loss;
  if (!std::isfinite(loss)) {
    res.overflow = true;
    res.diagnostic = "hazard overflow";
  }
  return res;
}

template NllResult<float> fused_nll(const Matrix<float>&, const Matrix<float>&, const SurvivalBatch&, std::size_t);
template NllResult<double> fused_nll(const Matrix<double>&, const Matrix<double>&, const SurvivalBatch&,
                                     std::size_t);
template NllResult<float> dense_nll(const Matrix<float>&, const Matrix<float>&, const SurvivalBatch&);
template NllResult<double> dense_nll(const Matrix<double>&, const Matrix<double>&, const SurvivalBatch&);

template <typename Scalar>
PiecewiseHazard predict_curve(const Matrix<Scalar>& states, std::size_t row, const Matrix<Scalar>& task_embeddings,
                              std::size_t task, const PieceGrid& grid) {
  const auto b = task_embeddings.cols();
  PiecewiseHazard h{grid, {}};
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double z = states.row(static_cast<Eigen::Index>(row))
                         .segment(static_cast<Eigen::Index>(p) * b, b)
                         .template cast<double>()
                         .dot(task_embeddings.row(static_cast<Eigen::Index>(task)).template cast<double>());
    h.rates.push_back(std::exp(z));
  }
  return h;
}

template PiecewiseHazard predict_curve(const Matrix<float>&, std::size_t, const Matrix<float>&, std::size_t,
                                       const PieceGrid&);
template PiecewiseHazard predict_curve(const Matrix<double>&, std::size_t, const Matrix<double>&, std::size_t,
                                       const PieceGrid&);

}  // namespace tte
