#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/diffcore/autodiff.hpp"
#include "sedkit/diffcore/random.hpp"
#include "sedkit/encoder/model.hpp"
#include "sedkit/evalsts/sts_data.hpp"
#include "sedkit/types.hpp"

namespace sedkit {

/// Student and teacher encoders disagree on architecture.
class ArchitectureMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Ensemble targets and distillation

/// Ordered teacher encoders sharing one architecture, plus the pooling used
/// to produce distillation targets.
class EnsembleSpec {
 public:
  explicit EnsembleSpec(std::vector<EncoderModel> members, PoolingSpec target_pool = PoolingSpec(1))
      : members_(std::move(members)), target_pool_(target_pool) {
    if (members_.empty()) throw std::invalid_argument("ensemble: at least one member is required");
    for (const auto& m : members_) {
      if (!(m.arch() == members_.front().arch())) {
        throw ArchitectureMismatch("ensemble: member architecture " + m.arch().describe() + " differs from " +
                                   members_.front().arch().describe());
      }
    }
  }

  std::size_t size() const noexcept { return members_.size(); }
  const std::vector<EncoderModel>& members() const noexcept { return members_; }
  const EncoderModel& member(std::size_t i) const { return members_.at(i); }
  const Architecture& arch() const noexcept { return members_.front().arch(); }
  std::size_t dim() const noexcept { return members_.front().dim(); }
  PoolingSpec target_pool() const noexcept { return target_pool_; }

 private:
  std::vector<EncoderModel> members_;
  PoolingSpec target_pool_;
};

/// Arithmetic mean of the raw member embeddings (no normalization).
inline Embedding ensemble_mean_embedding(const EnsembleSpec& ensemble, std::string_view sentence,
                                         PoolingSpec pool) {
  std::vector<double> acc(ensemble.dim(), 0.0);
  for (const auto& m : ensemble.members()) {
    const auto e = m.encode(sentence, pool);
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += e[d];
  }
  const double n = static_cast<double>(ensemble.size());
  for (auto& x : acc) x /= n;
  return Embedding(std::move(acc));
}

inline Embedding ensemble_mean_embedding(const EnsembleSpec& ensemble, std::string_view sentence) {
  return ensemble_mean_embedding(ensemble, sentence, ensemble.target_pool());
}

/// Distillation loss: mean over dimensions of squared differences. The
/// target enters as a constant, so only the student receives gradient.
inline Var sed_loss(const Embedding& target, const Var& student_out) {
  if (student_out.value().size() != target.dim()) {
    throw ShapeError("sed_loss: target dimension " + std::to_string(target.dim()) + " vs student " +
                     std::to_string(student_out.value().size()));
  }
  Var t = Var::constant(Tensor(student_out.shape(), target.vector()));
  return mean(square(sub(student_out, t)));
}

inline double sed_loss(const Embedding& target, const Embedding& student_out) {
  NoGradGuard no_grad;
  return sed_loss(target, Var::constant(Tensor::row(student_out.vector()))).item();
}

// ---------------------------------------------------------------------------
// Contrastive Tension

struct CtPair {
  std::string sentence_a;
  std::string sentence_b;
  int label = 0;  // 1 identical, 0 non-identical
};

struct CtBatch {
  std::vector<CtPair> pairs;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [](const CtPair& p) { return p.label == 1; }));
  }
  std::size_t negatives() const { return pairs.size() - positives(); }

  void validate() const {
    if (pairs.empty()) throw std::invalid_argument("ct: empty batch");
    for (const auto& p : pairs) {
      if (p.label != 0 && p.label != 1) throw std::invalid_argument("ct: label must be 0 or 1");
      if (p.label == 1 && p.sentence_a != p.sentence_b) {
        throw std::invalid_argument("ct: positive pair with differing sentences");
      }
    }
  }
};

/// Mean binary cross-entropy of sigmoid(<a(s_a), b(s_b)>) against the pair
/// labels. Gradients reach both encoders.
inline Var ct_loss(const EncoderModel& model_a, const EncoderModel& model_b, const CtBatch& batch,
                   PoolingSpec pool = PoolingSpec(1)) {
  batch.validate();
  std::vector<Var> logits;
  Tensor labels = Tensor::zeros({batch.pairs.size(), 1});
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const auto& p = batch.pairs[i];
    Var u = model_a.encode_var(p.sentence_a, pool);
    Var v = model_b.encode_var(p.sentence_b, pool);
    logits.push_back(sum(mul(u, v)));
    labels[i] = p.label;
  }
  return bce_with_logits(concat_rows(logits), labels);
}

/// Endless stream of CT batches. Each block of (negatives + 1) pairs holds
/// an anchor paired with itself followed by the anchor paired with
/// `negatives` other sentences drawn uniformly from the distinct corpus.
class CtBatchSampler {
 public:
  CtBatchSampler(const std::vector<std::string>& corpus, std::size_t negatives_per_positive, std::size_t batch_size,
                 std::uint64_t seed)
      : negatives_(negatives_per_positive), batch_size_(batch_size), rng_(seed) {
    if (batch_size == 0 || batch_size % (negatives_per_positive + 1) != 0) {
      throw std::invalid_argument("ct sampler: batch size " + std::to_string(batch_size) +
                                  " is not divisible by negatives+1 = " + std::to_string(negatives_per_positive + 1));
    }
    std::set<std::string> seen;
    for (const auto& s : corpus)
      if (seen.insert(s).second) distinct_.push_back(s);
    if (distinct_.size() < 2) throw std::invalid_argument("ct sampler: corpus needs at least 2 distinct sentences");
  }

  CtBatch next() {
    CtBatch batch;
    const std::size_t blocks = batch_size_ / (negatives_ + 1);
    std::uniform_int_distribution<std::size_t> pick(0, distinct_.size() - 1);
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t anchor = pick(rng_);
      batch.pairs.push_back({distinct_[anchor], distinct_[anchor], 1});
      std::vector<std::size_t> chosen;
      const bool unique = distinct_.size() - 1 >= negatives_;
      while (chosen.size() < negatives_) {
        const std::size_t j = pick(rng_);
        if (j == anchor) continue;
        if (unique && std::find(chosen.begin(), chosen.end(), j) != chosen.end()) continue;
        chosen.push_back(j);
      }
      for (auto j : chosen) batch.pairs.push_back({distinct_[anchor], distinct_[j], 0});
    }
    return batch;
  }

 private:
  std::size_t negatives_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::string> distinct_;
};

inline std::vector<CtBatch> sample_ct_batches(const std::vector<std::string>& corpus, std::size_t negatives_per_positive,
                                              std::size_t batch_size, std::uint64_t seed, std::size_t count) {
  CtBatchSampler sampler(corpus, negatives_per_positive, batch_size, seed);
  std::vector<CtBatch> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sampler.next());
  return out;
}

// ---------------------------------------------------------------------------
// Siamese NLI classification

enum class NliLabel { Entailment = 0, Neutral = 1, Contradiction = 2 };

inline NliLabel parse_nli_label(std::string_view text) {
  if (text == "entailment") return NliLabel::Entailment;
  if (text == "neutral") return NliLabel::Neutral;
  if (text == "contradiction") return NliLabel::Contradiction;
  throw DataError("unknown NLI label '" + std::string(text) + "'");
}

inline const char* nli_label_name(NliLabel l) {
  switch (l) {
    case NliLabel::Entailment: return "entailment";
    case NliLabel::Neutral: return "neutral";
    default: return "contradiction";
  }
}

struct LabeledNliPair {
  std::string premise;
  std::string hypothesis;
  NliLabel label = NliLabel::Entailment;
};

/// NLI TSV: premise, hypothesis, label string. Unknown labels and malformed
/// lines are skipped and reported; an empty result is an error.
inline std::vector<LabeledNliPair> load_nli_tsv(const std::filesystem::path& path, LoadIssues* issues = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open NLI file " + path.string());
  std::vector<LabeledNliPair> out;
  LoadIssues local;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.empty() || view.front() == '#') continue;
    auto f = split_tabs(view);
    if (f.size() != 3) {
      local.messages.push_back("line " + std::to_string(lineno) + ": expected 3 fields");
      continue;
    }
    try {
      out.push_back({std::string(f[0]), std::string(f[1]), parse_nli_label(f[2])});
    } catch (const DataError& e) {
      local.messages.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (issues) *issues = local;
  if (out.empty()) throw DataError("NLI file " + path.string() + " has no valid lines");
  return out;
}

/// Affine classifier over [u; v; |u - v|] to three classes. Discarded after
/// training; only the encoder is kept.
struct NliHead {
  Var weight;  // 3D x 3
  Var bias;    // 1 x 3

  static NliHead zeros(std::size_t dim) {
    return {Var::parameter(Tensor::zeros({3 * dim, 3})), Var::parameter(Tensor::zeros({1, 3}))};
  }
  static NliHead random(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    return {Var::parameter(normal_tensor(rng, {3 * dim, 3}, 1.0 / std::sqrt(3.0 * static_cast<double>(dim)))),
            Var::parameter(Tensor::zeros({1, 3}))};
  }
  std::vector<Var> parameters() const { return {weight, bias}; }
};

inline Var nli_logits(const Var& u, const Var& v, const NliHead& head) {
  Var features = concat_cols({u, v, abs(sub(u, v))});
  return add_row(matmul(features, head.weight), head.bias);
}

inline Var nli_siamese_loss(const EncoderModel& model, const NliHead& head, const std::vector<LabeledNliPair>& batch,
                            PoolingSpec pool = PoolingSpec(1)) {
  if (batch.empty()) throw std::invalid_argument("nli: empty batch");
  if (head.weight.shape() != Shape{3 * model.dim(), 3}) throw ShapeError("nli: classifier head does not match encoder width");
  std::vector<Var> rows;
  std::vector<std::size_t> targets;
  for (const auto& ex : batch) {
    Var u = model.encode_var(ex.premise, pool);
    Var v = model.encode_var(ex.hypothesis, pool);
    rows.push_back(nli_logits(u, v, head));
    targets.push_back(static_cast<std::size_t>(ex.label));
  }
  return softmax_cross_entropy(concat_rows(rows), std::move(targets));
}

// ---------------------------------------------------------------------------
// Siamese STS regression

/// Affine map from gold [0, 5] onto cosine targets [lower_bound, 1].
class RegressionTargetMap {
 public:
  explicit RegressionTargetMap(double lower_bound = 0.0) : lower_(lower_bound) {
    if (!(lower_bound >= 0.0 && lower_bound < 1.0)) {
      throw std::invalid_argument("regression target: lower bound must lie in [0, 1)");
    }
  }
  double lower_bound() const noexcept { return lower_; }
  static constexpr double upper_bound() noexcept { return 1.0; }

  double target(double gold) const {
    if (!valid_gold(gold)) throw std::invalid_argument("regression target: gold outside [0, 5]");
    return lower_ + (gold / 5.0) * (1.0 - lower_);
  }

 private:
  double lower_;
};

/// Differentiable cosine of two 1 x D rows.
inline Var cosine_var(const Var& u, const Var& v) {
  Var dot = sum(mul(u, v));
  Var nu = sqrt(sum(square(u)));
  Var nv = sqrt(sum(square(v)));
  return div(dot, mul(nu, nv));
}

inline Var sts_regression_loss(const EncoderModel& model, const ScoredPair& pair, const RegressionTargetMap& map,
                               PoolingSpec pool = PoolingSpec(1)) {
  const double target = map.target(pair.gold);
  Var c = cosine_var(model.encode_var(pair.sentence_1, pool), model.encode_var(pair.sentence_2, pool));
  return square(add_scalar(c, -target));
}

}  // namespace sedkit
