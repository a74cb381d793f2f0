#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sedkit/diagnostics.hpp"
#include "sedkit/diffcore/autodiff.hpp"
#include "sedkit/diffcore/optim.hpp"
#include "sedkit/diffcore/random.hpp"
#include "sedkit/evalsts/correlation.hpp"
#include "sedkit/types.hpp"

namespace sedkit {

enum class FlowInit { Identity, Random };

/// Stack of affine coupling layers over D-dimensional vectors.
///
/// Layer i splits coordinates into halves [0, D/2) and [D/2, D). Even layers
/// condition on the lower half and transform the upper half, odd layers the
/// reverse, so with two or more layers every coordinate is transformed.
/// A transformed block maps as y = x * exp(s(c)) + t(c), where c is the
/// conditioning block and s, t share one tanh hidden layer. The Jacobian is
/// triangular, so log|det J| is the sum of s over transformed coordinates.
class CouplingFlow {
 public:
  struct Layer {
    bool transform_upper = true;
    Var w_hidden, b_hidden;
    Var w_scale, b_scale;
    Var w_shift, b_shift;
  };

  /// `hidden == 0` selects width 2D. Identity init zeroes the output maps so
  /// the flow starts as the identity with log_det 0. Random init draws output
  /// weights with standard deviation random_scale / sqrt(hidden).
  CouplingFlow(std::size_t dim, std::size_t layers = 4, std::size_t hidden = 0, std::uint64_t seed = 1,
               FlowInit init = FlowInit::Identity, double random_scale = 0.3)
      : dim_(dim), hidden_(hidden == 0 ? 2 * dim : hidden) {
    if (dim < 2) throw std::invalid_argument("flow: dimension must be at least 2");
    if (layers < 2) throw std::invalid_argument("flow: at least two coupling layers are required");
    Rng rng(seed);
    const std::size_t lower = dim / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      Layer l;
      l.transform_upper = (i % 2 == 0);
      const std::size_t in = l.transform_upper ? lower : dim - lower;
      const std::size_t out = dim - in;
      l.w_hidden = Var::parameter(normal_tensor(rng, {in, hidden_}, 1.0 / std::sqrt(static_cast<double>(in))));
      l.b_hidden = Var::parameter(Tensor::zeros({1, hidden_}));
      if (init == FlowInit::Identity) {
        l.w_scale = Var::parameter(Tensor::zeros({hidden_, out}));
        l.b_scale = Var::parameter(Tensor::zeros({1, out}));
        l.w_shift = Var::parameter(Tensor::zeros({hidden_, out}));
        l.b_shift = Var::parameter(Tensor::zeros({1, out}));
      } else {
        const double out_sd = random_scale / std::sqrt(static_cast<double>(hidden_));
        l.b_hidden = Var::parameter(normal_tensor(rng, {1, hidden_}, random_scale));
        l.w_scale = Var::parameter(normal_tensor(rng, {hidden_, out}, out_sd));
        l.b_scale = Var::parameter(normal_tensor(rng, {1, out}, random_scale));
        l.w_shift = Var::parameter(normal_tensor(rng, {hidden_, out}, out_sd));
        l.b_shift = Var::parameter(normal_tensor(rng, {1, out}, random_scale));
      }
      layers_.push_back(std::move(l));
    }
  }

  CouplingFlow(const CouplingFlow& other) : dim_(other.dim_), hidden_(other.hidden_), layers_(other.layers_) {
    for (auto& [name, ref] : named_parameter_refs()) ref.get() = ref.get().clone_parameter();
  }
  CouplingFlow& operator=(const CouplingFlow& other) {
    if (this != &other) {
      CouplingFlow copy(other);
      *this = std::move(copy);
    }
    return *this;
  }
  CouplingFlow(CouplingFlow&&) noexcept = default;
  CouplingFlow& operator=(CouplingFlow&&) noexcept = default;

  std::size_t dim() const noexcept { return dim_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }

  std::vector<std::pair<std::string, Var>> named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    for (auto& [name, ref] : const_cast<CouplingFlow*>(this)->named_parameter_refs()) out.emplace_back(name, ref.get());
    return out;
  }
  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
  }

  /// Batch forward: rows of `x` (B x D) to latents, plus per-row log|det J| (B x 1).
  std::pair<Var, Var> forward_var(const Var& x) const {
    check_batch(x.value());
    Var z = x;
    Var log_det;
    for (const auto& l : layers_) {
      auto [cond, target] = split(z, l);
      auto [s, t] = subnet(l, cond);
      Var y = add(mul(target, exp(s)), t);
      z = l.transform_upper ? concat_cols({cond, y}) : concat_cols({y, cond});
      Var ld = sum_cols(s);
      log_det = log_det.defined() ? add(log_det, ld) : ld;
    }
    return {z, log_det};
  }

  struct Forward {
    Embedding z;
    double log_det = 0.0;
  };

  Forward forward(const Embedding& x) const {
    NoGradGuard no_grad;
    auto [z, ld] = forward_var(Var::constant(Tensor::row(x.vector())));
    return {Embedding(z.value().storage()), ld.item()};
  }

  /// Exact algebraic inverse of forward.
  Embedding inverse(const Embedding& z) const {
    NoGradGuard no_grad;
    Var x = Var::constant(Tensor::row(z.vector()));
    check_batch(x.value());
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      auto [cond, target] = split(x, *it);
      auto [s, t] = subnet(*it, cond);
      Var orig = mul(sub(target, t), exp(neg(s)));
      x = it->transform_upper ? concat_cols({cond, orig}) : concat_cols({orig, cond});
    }
    return Embedding(x.value().storage());
  }

  /// Mean negative log-likelihood under a standard Gaussian base density.
  Var nll_var(const Var& batch) const {
    auto [z, log_det] = forward_var(batch);
    const double log_norm = 0.5 * static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi);
    Var per_row = sub(add_scalar(scale(sum_cols(square(z)), 0.5), log_norm), log_det);
    return mean(per_row);
  }

  double nll(const std::vector<Embedding>& batch) const {
    NoGradGuard no_grad;
    return nll_var(Var::constant(stack(batch))).item();
  }

  Tensor stack(const std::vector<Embedding>& batch) const {
    if (batch.empty()) throw std::invalid_argument("flow: empty batch");
    std::vector<double> data;
    data.reserve(batch.size() * dim_);
    for (const auto& e : batch) {
      if (e.dim() != dim_) throw ShapeError("flow: embedding dimension mismatch");
      data.insert(data.end(), e.begin(), e.end());
    }
    return Tensor({batch.size(), dim_}, std::move(data));
  }

  bool same_weights(const CouplingFlow& other) const {
    if (dim_ != other.dim_ || hidden_ != other.hidden_ || layers_.size() != other.layers_.size()) return false;
    auto a = named_parameters(), b = other.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a[i].second.value() == b[i].second.value())) return false;
    return true;
  }

 private:
  void check_batch(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != dim_) throw ShapeError("flow: input must have " + std::to_string(dim_) + " columns");
    for (double v : x.storage()) {
      if (!std::isfinite(v)) throw std::domain_error("flow: non-finite input");
    }
  }

  std::pair<Var, Var> split(const Var& x, const Layer& l) const {
    const std::size_t lower = dim_ / 2;
    Var lo = slice_cols(x, 0, lower);
    Var hi = slice_cols(x, lower, dim_);
    return l.transform_upper ? std::make_pair(lo, hi) : std::make_pair(hi, lo);
  }

  static std::pair<Var, Var> subnet(const Layer& l, const Var& cond) {
    Var h = tanh(add_row(matmul(cond, l.w_hidden), l.b_hidden));
    Var s = add_row(matmul(h, l.w_scale), l.b_scale);
    Var t = add_row(matmul(h, l.w_shift), l.b_shift);
    return {s, t};
  }

  std::vector<std::pair<std::string, std::reference_wrapper<Var>>> named_parameter_refs() {
    std::vector<std::pair<std::string, std::reference_wrapper<Var>>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      const std::string p = "coupling" + std::to_string(i) + ".";
      out.emplace_back(p + "hidden.w", l.w_hidden);
      out.emplace_back(p + "hidden.b", l.b_hidden);
      out.emplace_back(p + "scale.w", l.w_scale);
      out.emplace_back(p + "scale.b", l.b_scale);
      out.emplace_back(p + "shift.w", l.w_shift);
      out.emplace_back(p + "shift.b", l.b_shift);
    }
    return out;
  }

  std::size_t dim_;
  std::size_t hidden_;
  std::vector<Layer> layers_;
};

struct FlowFitConfig {
  double lr = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct FlowFitResult {
  CouplingFlow flow;
  double initial_nll = 0.0;
  double final_nll = 0.0;
  std::size_t steps = 0;
  bool degenerate = false;
};

/// Maximum-likelihood fit of the flow parameters with Adam over shuffled
/// mini-batches. Only flow parameters change; the embeddings are constants.
inline FlowFitResult fit_flow(const CouplingFlow& initial, const std::vector<Embedding>& embeddings,
                              const FlowFitConfig& config) {
  if (config.batch_size == 0) throw std::invalid_argument("fit_flow: batch size must be positive");
  if (embeddings.size() < 2 * config.batch_size) {
    throw std::invalid_argument("fit_flow: need at least " + std::to_string(2 * config.batch_size) +
                                " embeddings, got " + std::to_string(embeddings.size()));
  }
  FlowFitResult result{initial, 0.0, 0.0, 0, false};
  result.degenerate = std::all_of(embeddings.begin(), embeddings.end(),
                                  [&](const Embedding& e) { return e == embeddings.front(); });
  if (result.degenerate) {
    Diagnostics::instance().warn(warning::kFlowDegenerate, "fit_flow: all training embeddings are identical");
  }
  result.initial_nll = result.flow.nll(embeddings);

  auto opt = Optimizer::adam(result.flow.parameters());
  Rng rng(config.seed);
  std::vector<std::size_t> order(embeddings.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + config.batch_size <= order.size(); start += config.batch_size) {
      std::vector<Embedding> batch;
      for (std::size_t i = start; i < start + config.batch_size; ++i) batch.push_back(embeddings[order[i]]);
      Var loss = result.flow.nll_var(Var::constant(result.flow.stack(batch)));
      backward(loss, opt.params());
      opt.step(config.lr);
      ++result.steps;
    }
  }
  result.final_nll = result.flow.nll(embeddings);
  return result;
}

enum class FlowScoring { Cosine, NegativeEuclidean };

/// Similarity of two embeddings measured in the flow's latent space.
inline double flow_score(const CouplingFlow& flow, const Embedding& e1, const Embedding& e2,
                         FlowScoring scoring = FlowScoring::Cosine) {
  if (e1.dim() != flow.dim() || e2.dim() != flow.dim()) throw ShapeError("flow_score: dimension mismatch");
  const auto z1 = flow.forward(e1).z;
  const auto z2 = flow.forward(e2).z;
  if (scoring == FlowScoring::Cosine) return cosine(z1.values(), z2.values());
  double d = 0.0;
  for (std::size_t i = 0; i < z1.dim(); ++i) d += (z1[i] - z2[i]) * (z1[i] - z2[i]);
  return -std::sqrt(d);
}

}  // namespace sedkit
