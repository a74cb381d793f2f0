#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/diffcore/optim.hpp"
#include "sedkit/objectives/objectives.hpp"
#include "sedkit/objectives/trainers.hpp"

namespace sedkit {

struct SedConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  std::size_t train_pool = 1;
  std::uint64_t seed = 1;
  bool precompute_targets = true;
};

/// Distils an ensemble into a student, one epoch at a time. The ensemble is
/// held by reference and must outlive the trainer; it is never modified.
class SedTrainer {
 public:
  SedTrainer(const SedTrainer&) = delete;
  SedTrainer& operator=(const SedTrainer&) = delete;

  SedTrainer(const EnsembleSpec& ensemble, const EncoderModel& student_init, std::vector<std::string> corpus,
             SedConfig config)
      : ensemble_(ensemble),
        student_(student_init),
        corpus_(std::move(corpus)),
        config_(config),
        opt_(Optimizer::adam(student_.parameters())),
        sched_(LrSchedule::warmup(config.lr, config.warmup_fraction,
                                  std::max<std::size_t>(1, config.epochs * batches_per_epoch(corpus_.size(),
                                                                                              config.batch_size)))),
        rng_(config.seed) {
    if (!(student_.arch() == ensemble_.arch())) {
      throw ArchitectureMismatch("train_sed: student architecture " + student_.arch().describe() +
                                 " differs from ensemble architecture " + ensemble_.arch().describe());
    }
    if (corpus_.empty()) throw std::invalid_argument("train_sed: corpus is empty");
    if (config_.precompute_targets) {
      targets_.reserve(corpus_.size());
      for (const auto& s : corpus_) targets_.push_back(ensemble_mean_embedding(ensemble_, s));
    }
  }

  Embedding target(std::size_t i) const {
    return config_.precompute_targets ? targets_[i] : ensemble_mean_embedding(ensemble_, corpus_[i]);
  }

  /// Mean distillation loss over the sentences at `idx`.
  Var batch_loss(const std::vector<std::size_t>& idx) const {
    const PoolingSpec pool(config_.train_pool);
    std::vector<Var> outputs;
    std::vector<double> flat;
    for (auto i : idx) {
      outputs.push_back(student_.encode_var(corpus_[i], pool));
      const auto t = target(i);
      flat.insert(flat.end(), t.begin(), t.end());
    }
    Var stacked = concat_rows(outputs);
    Var targets = Var::constant(Tensor({idx.size(), student_.dim()}, std::move(flat)));
    return mean(square(sub(stacked, targets)));
  }

  double corpus_loss() const {
    NoGradGuard no_grad;
    std::vector<std::size_t> idx(corpus_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return batch_loss(idx).item();
  }

  void run_epoch() {
    for (const auto& idx : epoch_batches(corpus_.size(), config_.batch_size, rng_)) {
      Var loss = batch_loss(idx);
      backward(loss, opt_.params());
      opt_.step(schedule_lr(sched_, step_++));
    }
    ++epochs_done_;
  }

  const EncoderModel& student() const noexcept { return student_; }
  std::size_t epochs_done() const noexcept { return epochs_done_; }
  std::uint64_t steps() const noexcept { return step_; }

 private:
  const EnsembleSpec& ensemble_;
  EncoderModel student_;
  std::vector<std::string> corpus_;
  SedConfig config_;
  Optimizer opt_;
  LrSchedule sched_;
  Rng rng_;
  std::vector<Embedding> targets_;
  std::uint64_t step_ = 0;
  std::size_t epochs_done_ = 0;
};

/// Trains a student toward the ensemble mean embedding with Adam and linear
/// warm-up. Zero epochs returns the initialization unchanged.
inline EncoderModel train_sed(const EnsembleSpec& ensemble, const EncoderModel& student_init,
                              const std::vector<std::string>& corpus, const SedConfig& config) {
  SedTrainer trainer(ensemble, student_init, corpus, config);
  for (std::size_t e = 0; e < config.epochs; ++e) trainer.run_epoch();
  return trainer.student();
}

}  // namespace sedkit
