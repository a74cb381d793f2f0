#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "sedkit/diffcore/autodiff.hpp"
#include "sedkit/diffcore/tensor.hpp"

namespace sedkit {

enum class OptimizerKind { Adam, RMSProp };

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct RmsPropHyper {
  double rho = 0.9;
  double epsilon = 1e-8;
};

/// Moment accumulators plus step counter for one optimizer instance.
/// Adam uses both `first` and `second`; RMSProp only `second`.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  AdamHyper adam;
  RmsPropHyper rmsprop;
  std::uint64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;

  static OptimizerState make_adam(std::span<const Tensor> params, AdamHyper hyper = {}) {
    OptimizerState s;
    s.kind = OptimizerKind::Adam;
    s.adam = hyper;
    for (const auto& p : params) {
      s.first.push_back(Tensor::zeros(p.shape()));
      s.second.push_back(Tensor::zeros(p.shape()));
    }
    return s;
  }

  static OptimizerState make_rmsprop(std::span<const Tensor> params, RmsPropHyper hyper = {}) {
    OptimizerState s;
    s.kind = OptimizerKind::RMSProp;
    s.rmsprop = hyper;
    for (const auto& p : params) s.second.push_back(Tensor::zeros(p.shape()));
    return s;
  }
};

/// One in-place update of `params` from `grads` at learning rate `lr`.
inline void optimizer_step(OptimizerState& state, std::span<Tensor> params, std::span<const Tensor> grads,
                           double lr) {
  if (params.size() != grads.size() || params.size() != state.second.size() ||
      (state.kind == OptimizerKind::Adam && state.first.size() != params.size())) {
    throw ShapeError("optimizer_step: parameter, gradient and accumulator counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.second[i])) {
      throw ShapeError("optimizer_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                       shape_to_string(params[i].shape()) + " vs grad " + shape_to_string(grads[i].shape()));
    }
  }
  ++state.step;
  if (state.kind == OptimizerKind::Adam) {
    const auto& h = state.adam;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].storage();
      const auto& g = grads[i].storage();
      auto& m = state.first[i].storage();
      auto& v = state.second[i].storage();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p[j] -= lr * mhat / (std::sqrt(vhat) + h.epsilon);
      }
    }
  } else {
    const auto& h = state.rmsprop;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].storage();
      const auto& g = grads[i].storage();
      auto& v = state.second[i].storage();
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = h.rho * v[j] + (1.0 - h.rho) * g[j] * g[j];
        p[j] -= lr * g[j] / (std::sqrt(v[j]) + h.epsilon);
      }
    }
  }
}

/// Binds an OptimizerState to a fixed list of graph parameters.
class Optimizer {
 public:
  Optimizer(std::vector<Var> params, OptimizerState state) : params_(std::move(params)), state_(std::move(state)) {}

  static Optimizer adam(std::vector<Var> params, AdamHyper hyper = {}) {
    auto values = snapshot(params);
    return Optimizer(std::move(params), OptimizerState::make_adam(values, hyper));
  }
  static Optimizer rmsprop(std::vector<Var> params, RmsPropHyper hyper = {}) {
    auto values = snapshot(params);
    return Optimizer(std::move(params), OptimizerState::make_rmsprop(values, hyper));
  }

  std::span<Var> params() { return params_; }
  const OptimizerState& state() const { return state_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Applies one update using the gradients currently stored on the parameters.
  void step(double lr) {
    // Tensors are swapped out and back so the core update works on plain spans.
    std::vector<Tensor> values, grads;
    values.reserve(params_.size());
    grads.reserve(params_.size());
    for (auto& p : params_) {
      values.push_back(std::move(p.mutable_value()));
      grads.push_back(p.grad());
    }
    optimizer_step(state_, values, grads, lr);
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].mutable_value() = std::move(values[i]);
  }

 private:
  static std::vector<Tensor> snapshot(const std::vector<Var>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(Tensor::zeros(p.shape()));
    return out;
  }

  std::vector<Var> params_;
  OptimizerState state_;
};

enum class ScheduleKind { LinearWarmupThenConstant, LinearDecay };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::LinearWarmupThenConstant;
  double peak_lr = 2e-5;
  double warmup_fraction = 0.1;
  double start_lr = 1e-5;
  double end_lr = 2e-6;
  std::uint64_t total_steps = 1;

  static LrSchedule warmup(double peak, double fraction, std::uint64_t total) {
    LrSchedule s;
    s.kind = ScheduleKind::LinearWarmupThenConstant;
    s.peak_lr = peak;
    s.warmup_fraction = fraction;
    s.total_steps = total;
    return s;
  }
  static LrSchedule decay(double start, double end, std::uint64_t total) {
    LrSchedule s;
    s.kind = ScheduleKind::LinearDecay;
    s.start_lr = start;
    s.end_lr = end;
    s.total_steps = total;
    return s;
  }
};

/// Learning rate for the update with zero-based index `step`; steps past
/// `total_steps` clamp to the final value.
inline double schedule_lr(const LrSchedule& sched, std::uint64_t step) {
  const auto total = std::max<std::uint64_t>(sched.total_steps, 1);
  const double s = static_cast<double>(std::min(step, total));
  if (sched.kind == ScheduleKind::LinearWarmupThenConstant) {
    const double window = sched.warmup_fraction * static_cast<double>(total);
    if (s >= window) return sched.peak_lr;
    return sched.peak_lr * s / window;
  }
  return sched.start_lr + (sched.end_lr - sched.start_lr) * s / static_cast<double>(total);
}

}  // namespace sedkit
