#include "tte/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace tte {

Vocabulary Vocabulary::from_corpus(std::span<const EventTimeline> timelines, std::size_t size) {
  std::map<std::string, std::size_t> counts;
  for (const EventTimeline& tl : timelines)
    for (const Event& e : tl.events) ++counts[e.code];
  std::vector<std::pair<std::size_t, std::string>> ranked;
  for (auto& [c, n] : counts) ranked.emplace_back(n, c);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::string> keep;
  for (std::size_t i = 0; i < ranked.size() && i + 1 < size; ++i) keep.push_back(ranked[i].second);
  return from_codes(std::move(keep));
}

Vocabulary Vocabulary::from_codes(std::vector<std::string> codes_without_unk) {
  Vocabulary v;
  for (std::string& c : codes_without_unk) {
    if (v.index_.count(c)) continue;
    v.index_.emplace(c, static_cast<int>(v.codes_.size()));
    v.codes_.push_back(std::move(c));
  }
  return v;
}

int Vocabulary::id(const std::string& code) const {
  auto it = index_.find(code);
  return it == index_.end() ? kUnknown : it->second;
}

void EncoderConfig::validate() const {
  if (vocab_size < 1 || inner_dim < 2 || layers < 1 || heads < 1 || attention_window < 1 || max_sequence < 1)
    throw ConfigError("encoder sizes must be positive");
  if (inner_dim % (2 * heads) != 0) throw ConfigError("inner_dim must be divisible by 2*heads");
  if (attention_window > max_sequence) throw ConfigError("attention_window exceeds max_sequence");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
  if (!(rotary_base > 1.0)) throw ConfigError("rotary base must exceed 1");
}

EmbeddedSequence embed_sequence(const EventTimeline& timeline, const Vocabulary& vocab, std::size_t max_sequence) {
  EmbeddedSequence seq;
  const std::size_t n = timeline.events.size();
  const std::size_t first = n > max_sequence ? n - max_sequence : 0;
  seq.dropped = first;
  seq.tokens.reserve(n - first);
  seq.times.reserve(n - first);
  for (std::size_t i = first; i < n; ++i) {
    seq.tokens.push_back(vocab.id(timeline.events[i].code));
    seq.times.push_back(timeline.events[i].time - timeline.birth_time);
  }
  return seq;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
EncoderParams<Scalar> EncoderParams<Scalar>::zeros(const EncoderConfig& cfg) {
  const auto d = static_cast<Eigen::Index>(cfg.inner_dim);
  const auto f = static_cast<Eigen::Index>(cfg.ff_dim());
  EncoderParams p;
  p.embedding = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(cfg.vocab_size), d);
  p.layers.resize(cfg.layers);
  for (auto& L : p.layers) {
    L.ln1_gain = L.ln1_bias = L.ln2_gain = L.ln2_bias = L.b2 = Matrix<Scalar>::Zero(1, d);
    L.wq = L.wk = L.wv = L.wo = Matrix<Scalar>::Zero(d, d);
    L.w1 = Matrix<Scalar>::Zero(d, f);
    L.b1 = Matrix<Scalar>::Zero(1, f);
    L.w2 = Matrix<Scalar>::Zero(f, d);
  }
  p.final_gain = p.final_bias = Matrix<Scalar>::Zero(1, d);
  return p;
}

template <typename Scalar>
EncoderParams<Scalar> EncoderParams<Scalar>::init(const EncoderConfig& cfg, std::mt19937_64& rng) {
  EncoderParams p = zeros(cfg);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto fill = [&](Matrix<Scalar>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
  };
  fill(p.embedding);
  for (auto& L : p.layers) {
    L.ln1_gain.setOnes();
    L.ln2_gain.setOnes();
    for (auto* m : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.w2}) fill(*m);
  }
  p.final_gain.setOnes();
  return p;
}

template struct EncoderParams<float>;
template struct EncoderParams<double>;

// ---------------------------------------------------------------------------

template <typename Scalar>
void apply_rotary(std::span<Scalar> x, double t, std::size_t head_dim, double base, bool inverse) {
  const std::size_t pairs = head_dim / 2;
  for (std::size_t h = 0; h + head_dim <= x.size(); h += head_dim) {
    for (std::size_t f = 0; f < pairs; ++f) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(f) / static_cast<double>(head_dim));
      const double angle = inverse ? -t * freq : t * freq;
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = x[h + 2 * f], b = x[h + 2 * f + 1];
      x[h + 2 * f] = static_cast<Scalar>(a * c - b * s);
      x[h + 2 * f + 1] = static_cast<Scalar>(a * s + b * c);
    }
  }
}

template void apply_rotary<float>(std::span<float>, double, std::size_t, double, bool);
template void apply_rotary<double>(std::span<double>, double, std::size_t, double, bool);

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gain, const Matrix<Scalar>& bias,
                          typename EncoderCache<Scalar>::Norm& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Scalar mean = x.row(j).mean();
    const Scalar var = (x.row(j).array() - mean).square().mean();
    const Scalar rstd = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    cache.rstd(j) = rstd;
    cache.xhat.row(j) = (x.row(j).array() - mean) * rstd;
  }
  return (cache.xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const Matrix<Scalar>& dy, const typename EncoderCache<Scalar>::Norm& cache,
                                   const Matrix<Scalar>& gain, Matrix<Scalar>& dgain, Matrix<Scalar>& dbias) {
  dgain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const Matrix<Scalar> dxhat = dy.array().rowwise() * gain.row(0).array();
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index j = 0; j < dy.rows(); ++j) {
    const Scalar m1 = dxhat.row(j).mean();
    const Scalar m2 = (dxhat.row(j).array() * cache.xhat.row(j).array()).mean();
    dx.row(j) = cache.rstd(j) * (dxhat.row(j).array() - m1 - cache.xhat.row(j).array() * m2);
  }
  return dx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Scalar> / std::numbers::sqrt2_v<Scalar>;
  return cdf + x * pdf;
}

template <typename Scalar>
Matrix<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
  Matrix<Scalar> m(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const auto scale = static_cast<Scalar>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : Scalar(0);
  return m;
}

template <typename Scalar>
void rotate_rows(Matrix<Scalar>& m, const std::vector<double>& times, std::size_t head_dim, double base,
                 bool inverse) {
  for (Eigen::Index j = 0; j < m.rows(); ++j)
    apply_rotary<Scalar>(std::span<Scalar>(m.row(j).data(), static_cast<std::size_t>(m.cols())),
                         times[static_cast<std::size_t>(j)], head_dim, base, inverse);
}

}  // namespace

template <typename Scalar>
Matrix<Scalar> Encoder<Scalar>::embed(const EncoderParams<Scalar>& params, const EmbeddedSequence& seq) const {
  Matrix<Scalar> x(static_cast<Eigen::Index>(seq.size()), params.embedding.cols());
  for (std::size_t j = 0; j < seq.size(); ++j) {
    const int tok = seq.tokens[j];
    if (tok < 0 || tok >= params.embedding.rows()) throw std::out_of_range("token id outside the embedding table");
    x.row(static_cast<Eigen::Index>(j)) = params.embedding.row(tok);
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> Encoder<Scalar>::forward(const EncoderParams<Scalar>& params, const EmbeddedSequence& seq, Mode mode,
                                        EncoderCache<Scalar>* cache, std::mt19937_64* rng) const {
  const bool drop = mode == Mode::train && cfg_.dropout > 0.0;
  if (drop && !rng) throw std::invalid_argument("dropout in train mode needs an RNG");
  const auto n = static_cast<Eigen::Index>(seq.size());
  const auto dh = static_cast<Eigen::Index>(cfg_.head_dim());
  const auto window = static_cast<Eigen::Index>(cfg_.attention_window);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  EncoderCache<Scalar> local;
  EncoderCache<Scalar>& c = cache ? *cache : local;
  c.tokens = seq.tokens;
  c.times = seq.times;
  c.layers.assign(params.layers.size(), {});

  Matrix<Scalar> x = embed(params, seq);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams<Scalar>& L = params.layers[l];
    auto& lc = c.layers[l];
    lc.h1 = layer_norm<Scalar>(x, L.ln1_gain, L.ln1_bias, lc.ln1);
    lc.q = lc.h1 * L.wq;
    lc.k = lc.h1 * L.wk;
    lc.v = lc.h1 * L.wv;
    rotate_rows(lc.q, seq.times, cfg_.head_dim(), cfg_.rotary_base, false);
    rotate_rows(lc.k, seq.times, cfg_.head_dim(), cfg_.rotary_base, false);

    lc.attn = Matrix<Scalar>::Zero(n, x.cols());
    lc.probs.assign(cfg_.heads, Matrix<Scalar>::Zero(n, window));
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
      for (Eigen::Index j = 0; j < n; ++j) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, j - window + 1);
        const Eigen::Index len = j - lo + 1;
        Vector<Scalar> s = (lc.k.block(lo, off, len, dh) * lc.q.row(j).segment(off, dh).transpose()) * scale;
        const Scalar mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        lc.probs[h].row(j).segment(window - len, len) = s.transpose();
        lc.attn.row(j).segment(off, dh) = s.transpose() * lc.v.block(lo, off, len, dh);
      }
    }
    Matrix<Scalar> y = lc.attn * L.wo;
    if (drop) {
      lc.drop1 = dropout_mask<Scalar>(n, x.cols(), cfg_.dropout, *rng);
      y.array() *= lc.drop1.array();
    } else {
      lc.drop1.resize(0, 0);
    }
    x += y;

    lc.h2 = layer_norm<Scalar>(x, L.ln2_gain, L.ln2_bias, lc.ln2);
    lc.pre = (lc.h2 * L.w1).rowwise() + L.b1.row(0);
    lc.act = lc.pre.unaryExpr([](Scalar v) { return gelu(v); });
    Matrix<Scalar> f = (lc.act * L.w2).rowwise() + L.b2.row(0);
    if (drop) {
      lc.drop2 = dropout_mask<Scalar>(n, x.cols(), cfg_.dropout, *rng);
      f.array() *= lc.drop2.array();
    } else {
      lc.drop2.resize(0, 0);
    }
    x += f;
    if (!x.allFinite()) throw NumericalError("non-finite activations in encoder layer " + std::to_string(l));
  }
  return layer_norm<Scalar>(x, params.final_gain, params.final_bias, c.final_ln);
}

template <typename Scalar>
void Encoder<Scalar>::backward(const EncoderParams<Scalar>& params, const EncoderCache<Scalar>& cache,
                               const Matrix<Scalar>& grad_repr, EncoderParams<Scalar>& grads) const {
  const auto n = static_cast<Eigen::Index>(cache.tokens.size());
  const auto dh = static_cast<Eigen::Index>(cfg_.head_dim());
  const auto window = static_cast<Eigen::Index>(cfg_.attention_window);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Matrix<Scalar> dx =
      layer_norm_backward<Scalar>(grad_repr, cache.final_ln, params.final_gain, grads.final_gain, grads.final_bias);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const LayerParams<Scalar>& L = params.layers[li];
    LayerParams<Scalar>& G = grads.layers[li];
    const auto& lc = cache.layers[li];

    // Feed-forward branch.
    Matrix<Scalar> df = dx;
    if (lc.drop2.size()) df.array() *= lc.drop2.array();
    G.w2.noalias() += lc.act.transpose() * df;
    G.b2 += df.colwise().sum();
    Matrix<Scalar> dpre = df * L.w2.transpose();
    dpre.array() *= lc.pre.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
    G.w1.noalias() += lc.h2.transpose() * dpre;
    G.b1 += dpre.colwise().sum();
    const Matrix<Scalar> dh2 = dpre * L.w1.transpose();
    dx += layer_norm_backward<Scalar>(dh2, lc.ln2, L.ln2_gain, G.ln2_gain, G.ln2_bias);

    // Attention branch.
    Matrix<Scalar> dy = dx;
    if (lc.drop1.size()) dy.array() *= lc.drop1.array();
    G.wo.noalias() += lc.attn.transpose() * dy;
    const Matrix<Scalar> dattn = dy * L.wo.transpose();

    Matrix<Scalar> dq = Matrix<Scalar>::Zero(n, dx.cols());
    Matrix<Scalar> dk = Matrix<Scalar>::Zero(n, dx.cols());
    Matrix<Scalar> dv = Matrix<Scalar>::Zero(n, dx.cols());
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
      for (Eigen::Index j = 0; j < n; ++j) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, j - window + 1);
        const Eigen::Index len = j - lo + 1;
        const RowVector<Scalar> p = lc.probs[h].row(j).segment(window - len, len);
        const RowVector<Scalar> dout = dattn.row(j).segment(off, dh);
        const Vector<Scalar> dp = lc.v.block(lo, off, len, dh) * dout.transpose();
        dv.block(lo, off, len, dh).noalias() += p.transpose() * dout;
        const Scalar dot = p.dot(dp.transpose());
        const Vector<Scalar> ds = (p.transpose().array() * (dp.array() - dot)).matrix() * scale;
        dq.row(j).segment(off, dh).noalias() += ds.transpose() * lc.k.block(lo, off, len, dh);
        dk.block(lo, off, len, dh).noalias() += ds * lc.q.row(j).segment(off, dh);
      }
    }
    rotate_rows(dq, cache.times, cfg_.head_dim(), cfg_.rotary_base, true);
    rotate_rows(dk, cache.times, cfg_.head_dim(), cfg_.rotary_base, true);

    G.wq.noalias() += lc.h1.transpose() * dq;
    G.wk.noalias() += lc.h1.transpose() * dk;
    G.wv.noalias() += lc.h1.transpose() * dv;
    Matrix<Scalar> dh1 = dq * L.wq.transpose();
    dh1.noalias() += dk * L.wk.transpose();
    dh1.noalias() += dv * L.wv.transpose();
    dx += layer_norm_backward<Scalar>(dh1, lc.ln1, L.ln1_gain, G.ln1_gain, G.ln1_bias);
  }

  for (Eigen::Index j = 0; j < n; ++j) grads.embedding.row(cache.tokens[static_cast<std::size_t>(j)]) += dx.row(j);
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace tte
