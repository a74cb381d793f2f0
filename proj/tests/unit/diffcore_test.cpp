#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "sedkit/diffcore/autodiff.hpp"
#include "sedkit/diffcore/optim.hpp"
#include "sedkit/diffcore/random.hpp"
#include "../support/gradcheck.hpp"

namespace sedkit {
namespace {

using testing::gradcheck;

TEST(Tensor, RejectsDataShapeMismatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({0, 3}, {}), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Backward, SquareAtThree) {
  Var x = Var::parameter(Tensor::scalar(3.0));
  Var y = square(x);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 6.0);
}

TEST(Backward, UnreachableParameterHasZeroGradient) {
  Var x = Var::parameter(Tensor::scalar(3.0));
  Var unused = Var::parameter(Tensor::scalar(-1.0));
  unused.mutable_grad()[0] = 42.0;  // stale value from an earlier pass
  Var loss = add_scalar(scale(x, 0.0), 5.0);
  std::vector<Var> params{x, unused};
  backward(loss, params);
  EXPECT_EQ(unused.grad().item(), 0.0);
  EXPECT_EQ(x.grad().item(), 0.0);
}

TEST(Backward, ConstantLossLeavesZeroGradient) {
  Var x = Var::parameter(Tensor::scalar(2.0));
  Var c = Var::constant(Tensor::scalar(7.0));
  std::vector<Var> params{x};
  backward(square(c), params);
  EXPECT_EQ(x.grad().item(), 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Var x = Var::parameter(Tensor::matrix(1, 2, {1.0, 2.0}));
  EXPECT_THROW(backward(square(x)), ShapeError);
}

TEST(Backward, RepeatedBackwardIsNotCumulative) {
  Var x = Var::parameter(Tensor::scalar(1.5));
  Var y = mul(x, x);
  backward(y);
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad().item(), 3.0);
}

TEST(Backward, NoGradGuardBuildsNoGraph) {
  Var x = Var::parameter(Tensor::scalar(1.0));
  NoGradGuard guard;
  Var y = square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, ShapeErrors) {
  Var a = Var::parameter(Tensor::zeros({2, 3}));
  Var b = Var::parameter(Tensor::zeros({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_NO_THROW(matmul(a, b));
  EXPECT_THROW(add_row(a, Var::constant(Tensor::zeros({1, 2}))), ShapeError);
  EXPECT_THROW(softmax_cross_entropy(a, {0, 5}), ShapeError);
}

TEST(Ops, BceAndCrossEntropyReferenceValues) {
  Var zero = Var::constant(Tensor::scalar(0.0));
  EXPECT_NEAR(bce_with_logits(zero, Tensor::scalar(1.0)).item(), std::log(2.0), 1e-15);
  Var big = Var::constant(Tensor::scalar(20.0));
  EXPECT_LT(bce_with_logits(big, Tensor::scalar(1.0)).item(), 1e-8);
  Var uniform = Var::constant(Tensor::zeros({2, 3}));
  EXPECT_NEAR(softmax_cross_entropy(uniform, {0, 2}).item(), std::log(3.0), 1e-15);
}

// A three-layer perceptron-like composition; its gradient is checked against
// central differences over every parameter coordinate.
TEST(GradCheck, RandomThreeLayerComposition) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Var x = Var::constant(normal_tensor(rng, {4, 5}, 1.0));
    Var w1 = Var::parameter(normal_tensor(rng, {5, 6}, 0.5));
    Var b1 = Var::parameter(normal_tensor(rng, {1, 6}, 0.1));
    Var w2 = Var::parameter(normal_tensor(rng, {6, 6}, 0.5));
    Var w3 = Var::parameter(normal_tensor(rng, {6, 3}, 0.5));
    auto loss = [&] {
      Var h1 = tanh(add_row(matmul(x, w1), b1));
      Var h2 = sigmoid(matmul(h1, w2));
      Var out = matmul(h2, w3);
      return softmax_cross_entropy(out, {0, 1, 2, 1});
    };
    auto r = gradcheck(loss, {w1, b1, w2, w3});
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

// Random compositions drawing from every differentiable operation.
class RandomComposition {
 public:
  explicit RandomComposition(std::uint64_t seed) : rng_(seed) {
    rows_ = std::uniform_int_distribution<std::size_t>(2, 4)(rng_);
    cols_ = std::uniform_int_distribution<std::size_t>(2, 5)(rng_);
    input_ = Var::parameter(normal_tensor(rng_, {rows_, cols_}, 1.0));
    params_.push_back(input_);
    const std::size_t depth = std::uniform_int_distribution<std::size_t>(3, 5)(rng_);
    for (std::size_t i = 0; i < depth; ++i) add_layer();
    reduction_ = std::uniform_int_distribution<int>(0, 3)(rng_);
    targets_.clear();
    for (std::size_t r = 0; r < rows_; ++r)
      targets_.push_back(std::uniform_int_distribution<std::size_t>(0, cols_ - 1)(rng_));
    labels_ = Tensor::zeros({rows_, cols_});
    for (auto& v : labels_.storage()) v = std::uniform_int_distribution<int>(0, 1)(rng_);
  }

  Var operator()() const {
    Var x = input_;
    for (const auto& layer : layers_) x = layer(x);
    switch (reduction_) {
      case 0: return sum(x);
      case 1: return mean(square(x));
      case 2: return softmax_cross_entropy(x, targets_);
      default: return bce_with_logits(x, labels_);
    }
  }

  const std::vector<Var>& params() const { return params_; }

 private:
  Var param(Shape shape, double sd = 0.5) {
    Var p = Var::parameter(normal_tensor(rng_, std::move(shape), sd));
    params_.push_back(p);
    return p;
  }

  void add_layer() {
    const std::size_t r = rows_, c = cols_;
    const int op = std::uniform_int_distribution<int>(0, 17)(rng_);
    switch (op) {
      case 0: {
        Var w = param({c, c}), b = param({1, c}, 0.1);
        layers_.push_back([w, b](const Var& x) { return tanh(add_row(matmul(x, w), b)); });
        break;
      }
      case 1: layers_.push_back([](const Var& x) { return mul(sigmoid(x), x); }); break;
      case 2: layers_.push_back([](const Var& x) { return gelu(x); }); break;
      case 3: {
        Var g = param({1, c}), b = param({1, c}, 0.1);
        layers_.push_back([g, b](const Var& x) { return layer_norm_rows(x, g, b); });
        break;
      }
      case 4: layers_.push_back([](const Var& x) { return softmax_rows(x); }); break;
      case 5: layers_.push_back([](const Var& x) { return add(x, scale(square(x), 0.1)); }); break;
      case 6: {
        Var y = param({r, c});
        layers_.push_back([y](const Var& x) { return div(x, add_scalar(square(y), 1.0)); });
        break;
      }
      case 7: layers_.push_back([](const Var& x) { return log(add_scalar(square(x), 1.0)); }); break;
      case 8: layers_.push_back([](const Var& x) { return sqrt(add_scalar(square(x), 0.5)); }); break;
      case 9: layers_.push_back([](const Var& x) { return exp(scale(x, 0.3)); }); break;
      case 10: layers_.push_back([](const Var& x) { return add(abs(x), neg(x)); }); break;
      case 11:
        layers_.push_back([](const Var& x) { return scale(matmul(matmul_nt(x, x), x), 0.1); });
        break;
      case 12:
        if (c >= 2) {
          const std::size_t h = c / 2;
          layers_.push_back(
              [h, c](const Var& x) { return concat_cols({slice_cols(x, h, c), slice_cols(x, 0, h)}); });
        }
        break;
      case 13: layers_.push_back([](const Var& x) { return add_row(transpose(transpose(x)), mean_rows(x)); }); break;
      case 14: {
        Var row = param({1, c});
        layers_.push_back([row](const Var& x) { return add(x, matmul(sum_cols(x), row)); });
        break;
      }
      case 15: {
        std::vector<std::size_t> ids;
        for (std::size_t i = 0; i < r; ++i) ids.push_back(std::uniform_int_distribution<std::size_t>(0, r - 1)(rng_));
        layers_.push_back([ids](const Var& x) { return add(x, gather_rows(x, ids)); });
        break;
      }
      case 16:
        layers_.push_back([r](const Var& x) { return concat_rows({slice_rows(x, 1, r), slice_rows(x, 0, 1)}); });
        break;
      default: {
        Var p = param({r, c});
        layers_.push_back([p](const Var& x) { return sub(x, mul(x, p)); });
        break;
      }
    }
  }

  Rng rng_;
  std::size_t rows_ = 0, cols_ = 0;
  Var input_;
  std::vector<Var> params_;
  std::vector<std::function<Var(const Var&)>> layers_;
  int reduction_ = 0;
  std::vector<std::size_t> targets_;
  Tensor labels_;
};

TEST(GradCheck, PropertyOverRandomCompositions) {
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 220; ++seed) {
    RandomComposition comp(seed);
    auto r = gradcheck([&] { return comp(); }, comp.params());
    worst = std::max(worst, r.max_rel_error);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Optimizer, AdamZeroGradientLeavesParameters) {
  std::vector<Tensor> params{Tensor::matrix(1, 3, {1.0, -2.0, 0.5})};
  std::vector<Tensor> grads{Tensor::zeros({1, 3})};
  auto state = OptimizerState::make_adam(params);
  optimizer_step(state, params, grads, 0.1);
  EXPECT_EQ(params[0], Tensor::matrix(1, 3, {1.0, -2.0, 0.5}));
  EXPECT_EQ(state.step, 1u);
}

TEST(Optimizer, AdamFirstStepIsBiasCorrected) {
  // m = 0.1, v = 0.001 -> mhat = 1, vhat = 1 -> update = lr / (1 + eps)
  std::vector<Tensor> params{Tensor::scalar(0.0)};
  std::vector<Tensor> grads{Tensor::scalar(1.0)};
  auto state = OptimizerState::make_adam(params);
  optimizer_step(state, params, grads, 0.1);
  EXPECT_NEAR(params[0].item(), -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Optimizer, RmsPropZeroLearningRateUpdatesOnlyAccumulators) {
  std::vector<Tensor> params{Tensor::matrix(1, 2, {1.0, 2.0})};
  std::vector<Tensor> grads{Tensor::matrix(1, 2, {3.0, -1.0})};
  auto state = OptimizerState::make_rmsprop(params);
  optimizer_step(state, params, grads, 0.0);
  EXPECT_EQ(params[0], Tensor::matrix(1, 2, {1.0, 2.0}));
  EXPECT_NEAR(state.second[0][0], 0.1 * 9.0, 1e-15);
  EXPECT_NEAR(state.second[0][1], 0.1 * 1.0, 1e-15);
}

TEST(Optimizer, RejectsShapeMismatch) {
  std::vector<Tensor> params{Tensor::zeros({1, 2})};
  std::vector<Tensor> grads{Tensor::zeros({2, 1})};
  auto state = OptimizerState::make_adam(params);
  EXPECT_THROW(optimizer_step(state, params, grads, 0.1), ShapeError);
  EXPECT_EQ(state.step, 0u);
}

TEST(Optimizer, StepCounterIncrementsByOne) {
  Var p = Var::parameter(Tensor::scalar(1.0));
  auto opt = Optimizer::rmsprop({p});
  for (int i = 1; i <= 4; ++i) {
    std::vector<Var> ps{p};
    backward(square(p), ps);
    opt.step(0.01);
    EXPECT_EQ(opt.state().step, static_cast<std::uint64_t>(i));
  }
}

TEST(Schedule, WarmupReferencePoints) {
  auto s = LrSchedule::warmup(2e-5, 0.1, 1000);
  EXPECT_EQ(schedule_lr(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 50), 1e-5);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 100), 2e-5);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 999), 2e-5);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 5000), 2e-5);
}

TEST(Schedule, DecayReferencePoints) {
  auto s = LrSchedule::decay(1e-5, 2e-6, 50000);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 0), 1e-5);
  EXPECT_NEAR(schedule_lr(s, 25000), 6e-6, 1e-20);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 50000), 2e-6);
  EXPECT_DOUBLE_EQ(schedule_lr(s, 90000), 2e-6);
}

TEST(Schedule, MonotonicityProperties) {
  for (std::uint64_t total : {1u, 7u, 100u, 1234u}) {
    for (double frac : {0.0, 0.1, 0.5, 1.0}) {
      auto w = LrSchedule::warmup(1e-3, frac, total);
      double prev = -1.0;
      for (std::uint64_t s = 0; s <= total + 3; ++s) {
        const double lr = schedule_lr(w, s);
        EXPECT_GE(lr, 0.0);
        EXPECT_GE(lr, prev);
        if (static_cast<double>(s) >= frac * static_cast<double>(total)) {
          EXPECT_EQ(lr, 1e-3);
        }
        prev = lr;
      }
    }
    auto d = LrSchedule::decay(1e-3, 1e-4, total);
    double prev = 1.0;
    for (std::uint64_t s = 0; s <= total; ++s) {
      const double lr = schedule_lr(d, s);
      EXPECT_GE(lr, 0.0);
      EXPECT_LE(lr, prev);
      prev = lr;
    }
  }
}

TEST(Determinism, IdenticalSeedsGiveBitIdenticalTrajectories) {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Var x = Var::constant(normal_tensor(rng, {8, 4}, 1.0));
    Var w = Var::parameter(normal_tensor(rng, {4, 3}, 0.3));
    auto opt = Optimizer::adam({w});
    std::vector<double> losses;
    for (int step = 0; step < 20; ++step) {
      Var loss = softmax_cross_entropy(matmul(x, w), {0, 1, 2, 0, 1, 2, 0, 1});
      backward(loss, opt.params());
      opt.step(0.05);
      losses.push_back(loss.item());
    }
    return std::make_pair(losses, w.value());
  };
  auto a = run(11), b = run(11);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

}  // namespace
}  // namespace sedkit
