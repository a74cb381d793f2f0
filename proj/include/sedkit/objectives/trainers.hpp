#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/diffcore/optim.hpp"
#include "sedkit/objectives/objectives.hpp"

namespace sedkit {

/// Shuffled mini-batch index blocks for one epoch; the last block may be short.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

// ---------------------------------------------------------------------------
// Contrastive Tension

struct CtConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  std::size_t negatives_per_positive = 7;
  double start_lr = 1e-3;  // start/end ratio 5:1 as in the reference recipe
  double end_lr = 2e-4;
  RmsPropHyper rmsprop;
  std::size_t pool_k = 1;
  std::uint64_t seed = 1;
  bool keep_model_b = true;
};

/// Tunes two copies of `base` with the CT objective under RMSProp and a
/// linearly decaying learning rate. Returns model b unless configured
/// otherwise.
inline EncoderModel train_ct(const EncoderModel& base, const std::vector<std::string>& corpus, const CtConfig& config) {
  EncoderModel model_a = base;
  EncoderModel model_b = base;
  if (config.steps == 0) return config.keep_model_b ? model_b : model_a;
  CtBatchSampler sampler(corpus, config.negatives_per_positive, config.batch_size, config.seed);
  auto params = model_a.parameters();
  for (auto& p : model_b.parameters()) params.push_back(p);
  auto opt = Optimizer::rmsprop(params, config.rmsprop);
  const auto sched = LrSchedule::decay(config.start_lr, config.end_lr, config.steps);
  const PoolingSpec pool(config.pool_k);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Var loss = ct_loss(model_a, model_b, sampler.next(), pool);
    backward(loss, opt.params());
    opt.step(schedule_lr(sched, step));
  }
  return config.keep_model_b ? model_b : model_a;
}

// ---------------------------------------------------------------------------
// Siamese NLI

struct NliConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t pool_k = 1;
  std::uint64_t seed = 1;
};

/// Fine-tunes `base` on NLI classification with a fresh seeded head that is
/// discarded afterwards.
inline EncoderModel train_nli(const EncoderModel& base, const std::vector<LabeledNliPair>& data,
                              const NliConfig& config) {
  if (data.empty()) throw std::invalid_argument("train_nli: no training pairs");
  EncoderModel model = base;
  const std::size_t total = config.epochs * batches_per_epoch(data.size(), config.batch_size);
  if (total == 0) return model;
  NliHead head = NliHead::random(model.dim(), derive_seed(config.seed, 0x4e4c));
  auto params = model.parameters();
  for (auto& p : head.parameters()) params.push_back(p);
  auto opt = Optimizer::adam(params);
  const auto sched = LrSchedule::warmup(config.lr, config.warmup_fraction, total);
  const PoolingSpec pool(config.pool_k);
  Rng rng(config.seed);
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(data.size(), config.batch_size, rng)) {
      std::vector<LabeledNliPair> batch;
      for (auto i : idx) batch.push_back(data[i]);
      Var loss = nli_siamese_loss(model, head, batch, pool);
      backward(loss, opt.params());
      opt.step(schedule_lr(sched, step++));
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Siamese STS regression

struct RegressionConfig {
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t pool_k = 1;
  std::uint64_t seed = 1;
};

inline Var sts_regression_batch_loss(const EncoderModel& model, const std::vector<ScoredPair>& pairs,
                                     const std::vector<std::size_t>& idx, const RegressionTargetMap& map,
                                     PoolingSpec pool) {
  Var total;
  for (auto i : idx) {
    Var l = sts_regression_loss(model, pairs[i], map, pool);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(idx.size()));
}

/// Epoch-at-a-time regression trainer so callers can evaluate between
/// epochs (early stopping, grid search).
class RegressionTrainer {
 public:
  RegressionTrainer(const RegressionTrainer&) = delete;
  RegressionTrainer& operator=(const RegressionTrainer&) = delete;

  RegressionTrainer(const EncoderModel& init, std::vector<ScoredPair> train, RegressionTargetMap map,
                    RegressionConfig config)
      : model_(init),
        train_(std::move(train)),
        map_(map),
        config_(config),
        opt_(Optimizer::adam(model_.parameters())),
        sched_(LrSchedule::warmup(config.lr, config.warmup_fraction,
                                  std::max<std::size_t>(1, config.epochs * batches_per_epoch(train_.size(),
                                                                                              config.batch_size)))),
        rng_(config.seed) {
    if (train_.empty()) throw std::invalid_argument("regression: no training pairs");
    for (const auto& p : train_) map_.target(p.gold);
  }

  void run_epoch() {
    const PoolingSpec pool(config_.pool_k);
    for (const auto& idx : epoch_batches(train_.size(), config_.batch_size, rng_)) {
      Var loss = sts_regression_batch_loss(model_, train_, idx, map_, pool);
      backward(loss, opt_.params());
      opt_.step(schedule_lr(sched_, step_++));
    }
    ++epochs_done_;
  }

  const EncoderModel& model() const noexcept { return model_; }
  std::size_t epochs_done() const noexcept { return epochs_done_; }
  const RegressionConfig& config() const noexcept { return config_; }

 private:
  EncoderModel model_;
  std::vector<ScoredPair> train_;
  RegressionTargetMap map_;
  RegressionConfig config_;
  Optimizer opt_;
  LrSchedule sched_;
  Rng rng_;
  std::uint64_t step_ = 0;
  std::size_t epochs_done_ = 0;
};

inline EncoderModel train_sts_regression(const EncoderModel& init, const std::vector<ScoredPair>& train,
                                         const RegressionTargetMap& map, const RegressionConfig& config) {
  RegressionTrainer trainer(init, train, map, config);
  for (std::size_t e = 0; e < config.epochs; ++e) trainer.run_epoch();
  return trainer.model();
}

}  // namespace sedkit
