#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tte/event_store.hpp"
#include "tte/tensor.hpp"

namespace tte {

/// Code -> token id. Id 0 is reserved for codes outside the vocabulary.
class Vocabulary {
 public:
  static constexpr int kUnknown = 0;

  Vocabulary() : codes_{"<unk>"} {}
  /// Keeps the `size - 1` most frequent codes of `timelines` (ties by code).
  static Vocabulary from_corpus(std::span<const EventTimeline> timelines, std::size_t size);
  static Vocabulary from_codes(std::vector<std::string> codes_without_unk);

  int id(const std::string& code) const;
  std::size_t size() const { return codes_.size(); }
  const std::vector<std::string>& codes() const { return codes_; }

 private:
  std::vector<std::string> codes_;
  std::unordered_map<std::string, int> index_;
};

struct EncoderConfig {
  std::size_t vocab_size = 512;
  std::size_t inner_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t attention_window = 64;
  std::size_t max_sequence = 512;
  double dropout = 0.0;
  double rotary_base = 10000.0;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  std::size_t head_dim() const { return inner_dim / heads; }
  std::size_t ff_dim() const { return 4 * inner_dim; }
};

/// Token ids and times (days since birth) of one patient, most recent
/// `max_sequence` events.
struct EmbeddedSequence {
  std::vector<int> tokens;
  std::vector<double> times;
  std::size_t dropped = 0;  // events removed by truncation
  bool truncated() const { return dropped > 0; }
  std::size_t size() const { return tokens.size(); }
};

EmbeddedSequence embed_sequence(const EventTimeline& timeline, const Vocabulary& vocab, std::size_t max_sequence);

template <typename Scalar>
struct LayerParams {
  Matrix<Scalar> ln1_gain, ln1_bias;  // 1 x d
  Matrix<Scalar> wq, wk, wv, wo;      // d x d
  Matrix<Scalar> ln2_gain, ln2_bias;  // 1 x d
  Matrix<Scalar> w1, b1;              // d x 4d, 1 x 4d
  Matrix<Scalar> w2, b2;              // 4d x d, 1 x d
};

template <typename Scalar>
struct EncoderParams {
  Matrix<Scalar> embedding;  // vocab x d
  std::vector<LayerParams<Scalar>> layers;
  Matrix<Scalar> final_gain, final_bias;  // 1 x d

  /// Gaussian(0, 0.02) weights, unit LayerNorm gains, zero biases.
  static EncoderParams init(const EncoderConfig& cfg, std::mt19937_64& rng);
  static EncoderParams zeros(const EncoderConfig& cfg);

  /// Calls f(name, matrix) for every parameter tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("encoder.embedding"), self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      f(p + "ln1_gain", L.ln1_gain);
      f(p + "ln1_bias", L.ln1_bias);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "ln2_gain", L.ln2_gain);
      f(p + "ln2_bias", L.ln2_bias);
      f(p + "w1", L.w1);
      f(p + "b1", L.b1);
      f(p + "w2", L.w2);
      f(p + "b2", L.b2);
    }
    f(std::string("encoder.final_gain"), self.final_gain);
    f(std::string("encoder.final_bias"), self.final_bias);
  }
};

/// Rotates consecutive pairs of each head block by angle t * base^(-2f/head_dim).
/// `inverse` applies the transpose rotation (used for gradients).
template <typename Scalar>
void apply_rotary(std::span<Scalar> x, double t, std::size_t head_dim, double base = 10000.0, bool inverse = false);

template <typename Scalar>
RowVector<Scalar> rotary(const RowVector<Scalar>& x, double t, std::size_t head_dim, double base = 10000.0) {
  RowVector<Scalar> y = x;
  apply_rotary<Scalar>(std::span<Scalar>(y.data(), static_cast<std::size_t>(y.size())), t, head_dim, base);
  return y;
}

/// Saved activations for one forward pass.
template <typename Scalar>
struct EncoderCache {
  struct Norm {
    Matrix<Scalar> xhat;
    Vector<Scalar> rstd;
  };
  struct Layer {
    Norm ln1, ln2;
    Matrix<Scalar> h1, q, k, v;       // q, k after rotation
    std::vector<Matrix<Scalar>> probs;  // per head, [n x window]
    Matrix<Scalar> attn;              // concatenated head outputs
    Matrix<Scalar> drop1, drop2;      // inverted-dropout scales; empty when off
    Matrix<Scalar> h2, pre, act;
  };
  std::vector<int> tokens;
  std::vector<double> times;
  std::vector<Layer> layers;
  Norm final_ln;
};

enum class Mode { eval, train };

/// Pre-norm causal local-attention transformer.
template <typename Scalar>
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const EncoderConfig& config() const { return cfg_; }

  /// Rows of the embedding table for the sequence.
  Matrix<Scalar> embed(const EncoderParams<Scalar>& params, const EmbeddedSequence& seq) const;

  /// Representations R [n x d]. `rng` is required in train mode with dropout.
  Matrix<Scalar> forward(const EncoderParams<Scalar>& params, const EmbeddedSequence& seq, Mode mode,
                         EncoderCache<Scalar>* cache = nullptr, std::mt19937_64* rng = nullptr) const;

  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/dR.
  void backward(const EncoderParams<Scalar>& params, const EncoderCache<Scalar>& cache,
                const Matrix<Scalar>& grad_repr, EncoderParams<Scalar>& grads) const;

 private:
  EncoderConfig cfg_;
};

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace tte
