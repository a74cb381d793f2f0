#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sedkit/diagnostics.hpp"
#include "sedkit/diffcore/autodiff.hpp"
#include "sedkit/diffcore/random.hpp"
#include "sedkit/encoder/vocabulary.hpp"
#include "sedkit/types.hpp"

namespace sedkit {

/// Shape of a transformer encoder. Two encoders are interchangeable as
/// teacher/student only when their architectures compare equal.
struct Architecture {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t max_len = 32;

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ffn == 0 || max_len == 0) {
      throw std::invalid_argument("architecture: all sizes must be positive");
    }
    if (hidden % heads != 0) throw std::invalid_argument("architecture: hidden must be divisible by heads");
  }

  std::string describe() const {
    std::ostringstream out;
    out << "L=" << layers << " D=" << hidden << " H=" << heads << " F=" << ffn << " T=" << max_len;
    return out.str();
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Number of final layers to mean-pool over. Layer k counts back from the
/// last transformer layer; the embedding layer joins only when k > L.
class PoolingSpec {
 public:
  explicit PoolingSpec(std::size_t k = 1) : k_(k) {
    if (k < 1 || k > 3) throw std::invalid_argument("pooling: k must be 1, 2 or 3");
  }
  std::size_t k() const noexcept { return k_; }
  friend bool operator==(const PoolingSpec&, const PoolingSpec&) = default;

 private:
  std::size_t k_;
};

/// Small post-norm transformer encoder over word tokens. Copies are deep:
/// a copied model owns independent parameters.
class EncoderModel {
 public:
  EncoderModel(Architecture arch, std::shared_ptr<const Vocabulary> vocab, std::uint64_t seed)
      : arch_(arch), vocab_(std::move(vocab)) {
    arch_.validate();
    if (!vocab_) throw std::invalid_argument("encoder: vocabulary required");
    Rng rng(seed);
    const std::size_t d = arch_.hidden, f = arch_.ffn;
    tok_emb_ = Var::parameter(normal_tensor(rng, {vocab_->size(), d}, 0.5));
    pos_emb_ = Var::parameter(normal_tensor(rng, {arch_.max_len, d}, 0.1));
    emb_gain_ = Var::parameter(Tensor::filled({1, d}, 1.0));
    emb_bias_ = Var::parameter(Tensor::zeros({1, d}));
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(f));
    for (std::size_t l = 0; l < arch_.layers; ++l) {
      Layer layer;
      layer.wq = Var::parameter(normal_tensor(rng, {d, d}, sd));
      layer.wk = Var::parameter(normal_tensor(rng, {d, d}, sd));
      layer.wv = Var::parameter(normal_tensor(rng, {d, d}, sd));
      layer.wo = Var::parameter(normal_tensor(rng, {d, d}, sd));
      layer.bq = Var::parameter(Tensor::zeros({1, d}));
      layer.bk = Var::parameter(Tensor::zeros({1, d}));
      layer.bv = Var::parameter(Tensor::zeros({1, d}));
      layer.bo = Var::parameter(Tensor::zeros({1, d}));
      layer.ln1_gain = Var::parameter(Tensor::filled({1, d}, 1.0));
      layer.ln1_bias = Var::parameter(Tensor::zeros({1, d}));
      layer.w1 = Var::parameter(normal_tensor(rng, {d, f}, sd));
      layer.b1 = Var::parameter(Tensor::zeros({1, f}));
      layer.w2 = Var::parameter(normal_tensor(rng, {f, d}, sf));
      layer.b2 = Var::parameter(Tensor::zeros({1, d}));
      layer.ln2_gain = Var::parameter(Tensor::filled({1, d}, 1.0));
      layer.ln2_bias = Var::parameter(Tensor::zeros({1, d}));
      layers_.push_back(std::move(layer));
    }
  }

  EncoderModel(const EncoderModel& other)
      : arch_(other.arch_),
        vocab_(other.vocab_),
        tok_emb_(other.tok_emb_),
        pos_emb_(other.pos_emb_),
        emb_gain_(other.emb_gain_),
        emb_bias_(other.emb_bias_),
        layers_(other.layers_) {
    for (auto& [name, var] : named_parameter_refs()) var.get() = var.get().clone_parameter();
  }
  EncoderModel& operator=(const EncoderModel& other) {
    if (this != &other) {
      EncoderModel copy(other);
      *this = std::move(copy);
    }
    return *this;
  }
  EncoderModel(EncoderModel&&) noexcept = default;
  EncoderModel& operator=(EncoderModel&&) noexcept = default;

  const Architecture& arch() const noexcept { return arch_; }
  const Vocabulary& vocab() const noexcept { return *vocab_; }
  const std::shared_ptr<const Vocabulary>& vocab_ptr() const noexcept { return vocab_; }
  std::size_t dim() const noexcept { return arch_.hidden; }
  /// Token embedding table (V x D); shared with tied output heads.
  const Var& token_embeddings() const noexcept { return tok_emb_; }

  /// Parameters in canonical (checkpoint) order with stable names.
  std::vector<std::pair<std::string, Var>> named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    for (auto& [name, ref] : const_cast<EncoderModel*>(this)->named_parameter_refs())
      out.emplace_back(name, ref.get());
    return out;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
  }

  /// Token ids for a sentence, truncated to max_len (recording a warning).
  std::vector<TokenId> prepare(std::string_view sentence) const {
    auto ids = vocab_->tokenize(sentence);
    if (ids.size() > arch_.max_len) {
      Diagnostics::instance().warn(warning::kTruncation, "sentence of " + std::to_string(ids.size()) +
                                                             " tokens truncated to " +
                                                             std::to_string(arch_.max_len));
      ids.resize(arch_.max_len);
    }
    return ids;
  }

  /// L+1 hidden-state grids (embedding layer first), each padded_len x D.
  /// Positions at or beyond ids.size() are padding and masked as keys.
  std::vector<Var> hidden_states(const std::vector<TokenId>& ids, std::size_t padded_len = 0) const {
    const std::size_t n = ids.size();
    if (n == 0) throw std::invalid_argument("encoder: empty token sequence");
    if (padded_len == 0) padded_len = n;
    if (padded_len < n || padded_len > arch_.max_len) {
      throw std::invalid_argument("encoder: sequence length exceeds max_len");
    }
    std::vector<TokenId> padded = ids;
    padded.resize(padded_len, vocab_->pad_id());

    std::vector<Var> states;
    states.reserve(arch_.layers + 1);
    Var x = add(gather_rows(tok_emb_, padded), slice_rows(pos_emb_, 0, padded_len));
    Var h = layer_norm_rows(x, emb_gain_, emb_bias_);
    states.push_back(h);

    Var mask;
    if (padded_len > n) {
      Tensor m = Tensor::zeros({padded_len, padded_len});
      for (std::size_t i = 0; i < padded_len; ++i)
        for (std::size_t j = n; j < padded_len; ++j) m(i, j) = -std::numeric_limits<double>::infinity();
      mask = Var::constant(std::move(m));
    }
    const std::size_t dh = arch_.hidden / arch_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& layer : layers_) {
      Var q = add_row(matmul(h, layer.wq), layer.bq);
      Var k = add_row(matmul(h, layer.wk), layer.bk);
      Var v = add_row(matmul(h, layer.wv), layer.bv);
      std::vector<Var> heads;
      heads.reserve(arch_.heads);
      for (std::size_t hd = 0; hd < arch_.heads; ++hd) {
        Var qh = slice_cols(q, hd * dh, (hd + 1) * dh);
        Var kh = slice_cols(k, hd * dh, (hd + 1) * dh);
        Var vh = slice_cols(v, hd * dh, (hd + 1) * dh);
        Var scores = scale(matmul_nt(qh, kh), inv_sqrt);
        if (mask.defined()) scores = add(scores, mask);
        heads.push_back(matmul(softmax_rows(scores), vh));
      }
      Var attn = add_row(matmul(arch_.heads == 1 ? heads.front() : concat_cols(heads), layer.wo), layer.bo);
      Var h1 = layer_norm_rows(add(h, attn), layer.ln1_gain, layer.ln1_bias);
      Var ff = add_row(matmul(gelu(add_row(matmul(h1, layer.w1), layer.b1)), layer.w2), layer.b2);
      h = layer_norm_rows(add(h1, ff), layer.ln2_gain, layer.ln2_bias);
      states.push_back(h);
    }
    return states;
  }

  /// Mean over the final k layers of the token-mean of non-padding rows; 1 x D.
  Var pooled(const std::vector<TokenId>& ids, PoolingSpec pool, std::size_t padded_len = 0) const {
    if (pool.k() > arch_.layers + 1) {
      throw std::invalid_argument("pooling: k=" + std::to_string(pool.k()) + " exceeds depth L+1=" +
                                  std::to_string(arch_.layers + 1));
    }
    const auto states = hidden_states(ids, padded_len);
    const std::size_t n = ids.size();
    const std::size_t first = states.size() - pool.k();
    Var acc;
    for (std::size_t l = first; l < states.size(); ++l) {
      Var tokens = states[l].rows() == n ? states[l] : slice_rows(states[l], 0, n);
      Var layer_mean = mean_rows(tokens);
      acc = acc.defined() ? add(acc, layer_mean) : layer_mean;
    }
    return scale(acc, 1.0 / static_cast<double>(pool.k()));
  }

  /// Differentiable sentence embedding (1 x D).
  Var encode_var(std::string_view sentence, PoolingSpec pool) const { return pooled(prepare(sentence), pool); }

  Embedding encode(std::string_view sentence, PoolingSpec pool) const {
    NoGradGuard no_grad;
    return Embedding(encode_var(sentence, pool).value().storage());
  }

  /// Encodes every sentence on a grid padded to the longest one.
  std::vector<Embedding> encode_batch(const std::vector<std::string>& sentences, PoolingSpec pool) const {
    NoGradGuard no_grad;
    std::vector<std::vector<TokenId>> ids;
    std::size_t longest = 0;
    for (const auto& s : sentences) {
      ids.push_back(prepare(s));
      longest = std::max(longest, ids.back().size());
    }
    std::vector<Embedding> out;
    out.reserve(ids.size());
    for (const auto& seq : ids) out.emplace_back(pooled(seq, pool, longest).value().storage());
    return out;
  }

  /// True when architecture, vocabulary and every parameter value match bitwise.
  bool same_weights(const EncoderModel& other) const {
    if (!(arch_ == other.arch_) || !(*vocab_ == *other.vocab_)) return false;
    auto a = named_parameters();
    auto b = other.named_parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].first != b[i].first || !(a[i].second.value() == b[i].second.value())) return false;
    }
    return true;
  }

 private:
  struct Layer {
    Var wq, wk, wv, wo, bq, bk, bv, bo;
    Var ln1_gain, ln1_bias;
    Var w1, b1, w2, b2;
    Var ln2_gain, ln2_bias;
  };

  std::vector<std::pair<std::string, std::reference_wrapper<Var>>> named_parameter_refs() {
    std::vector<std::pair<std::string, std::reference_wrapper<Var>>> out;
    out.emplace_back("embeddings.token", tok_emb_);
    out.emplace_back("embeddings.position", pos_emb_);
    out.emplace_back("embeddings.norm.gain", emb_gain_);
    out.emplace_back("embeddings.norm.bias", emb_bias_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& L = layers_[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "attn.wq", L.wq);
      out.emplace_back(p + "attn.bq", L.bq);
      out.emplace_back(p + "attn.wk", L.wk);
      out.emplace_back(p + "attn.bk", L.bk);
      out.emplace_back(p + "attn.wv", L.wv);
      out.emplace_back(p + "attn.bv", L.bv);
      out.emplace_back(p + "attn.wo", L.wo);
      out.emplace_back(p + "attn.bo", L.bo);
      out.emplace_back(p + "norm1.gain", L.ln1_gain);
      out.emplace_back(p + "norm1.bias", L.ln1_bias);
      out.emplace_back(p + "ffn.w1", L.w1);
      out.emplace_back(p + "ffn.b1", L.b1);
      out.emplace_back(p + "ffn.w2", L.w2);
      out.emplace_back(p + "ffn.b2", L.b2);
      out.emplace_back(p + "norm2.gain", L.ln2_gain);
      out.emplace_back(p + "norm2.bias", L.ln2_bias);
    }
    return out;
  }

  Architecture arch_;
  std::shared_ptr<const Vocabulary> vocab_;
  Var tok_emb_, pos_emb_, emb_gain_, emb_bias_;
  std::vector<Layer> layers_;
};

}  // namespace sedkit
