#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sedkit/diffcore/optim.hpp"
#include "sedkit/encoder/model.hpp"

namespace sedkit {

struct PretrainConfig {
  Architecture arch;
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  double mask_prob = 0.15;
  std::size_t min_count = 1;
  std::uint64_t seed = 1;
};

/// Masked-token reconstruction loss for one batch of token sequences, using
/// a decoder tied to the token embedding table plus an output bias.
inline Var masked_token_loss(const EncoderModel& model, const Var& output_bias,
                             const std::vector<std::vector<TokenId>>& batch, double mask_prob, Rng& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Var total;
  for (const auto& ids : batch) {
    std::vector<TokenId> input = ids;
    std::vector<std::size_t> positions;
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (coin(rng) < mask_prob) positions.push_back(i);
    }
    if (positions.empty()) {
      positions.push_back(std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng));
    }
    for (auto p : positions) {
      targets.push_back(ids[p]);
      input[p] = model.vocab().mask_id();
    }
    auto states = model.hidden_states(input);
    Var rows = gather_rows(states.back(), positions);
    Var logits = add_row(matmul_nt(rows, model.token_embeddings()), output_bias);
    Var loss = softmax_cross_entropy(logits, std::move(targets));
    total = total.defined() ? add(total, loss) : loss;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

/// Builds a vocabulary from `corpus` and trains a base checkpoint with a
/// masked-token objective. Zero steps returns the seeded initialization.
inline EncoderModel pretrain_base(const std::vector<std::string>& corpus, const PretrainConfig& config) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: corpus is empty");
  if (corpus.size() < config.batch_size) {
    throw std::invalid_argument("pretrain: corpus of " + std::to_string(corpus.size()) +
                                " sentences is smaller than batch size " + std::to_string(config.batch_size));
  }
  auto vocab = std::make_shared<const Vocabulary>(Vocabulary::build(corpus, config.min_count));
  EncoderModel model(config.arch, vocab, derive_seed(config.seed, 0x1417));
  if (config.steps == 0) return model;

  Var output_bias = Var::parameter(Tensor::zeros({1, vocab->size()}));
  auto params = model.parameters();
  params.push_back(output_bias);
  auto opt = Optimizer::adam(params);
  const auto sched = LrSchedule::warmup(config.lr, config.warmup_fraction, config.steps);
  Rng rng(derive_seed(config.seed, 0x5a3e));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::vector<TokenId>> batch;
    for (std::size_t b = 0; b < config.batch_size; ++b) batch.push_back(model.prepare(corpus[pick(rng)]));
    Var loss = masked_token_loss(model, output_bias, batch, config.mask_prob, rng);
    backward(loss, opt.params());
    opt.step(schedule_lr(sched, step));
  }
  return model;
}

}  // namespace sedkit
