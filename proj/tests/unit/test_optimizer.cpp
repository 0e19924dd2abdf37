#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mdd/optimizer.hpp"

namespace mdd {
namespace {

std::vector<Parameter<double>> two_params() {
  return {{"w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5})}, {"b", Tensor<double>({1}, 0.25)}};
}

TEST(Adam, FirstStepClosedForm) {
  // After one step the bias-corrected ratio is g / (|g| + eps), so each
  // parameter moves by lr * g / (|g| + eps) against the gradient.
  auto params = two_params();
  const auto before = params;
  const std::vector<Tensor<double>> grads{Tensor<double>({3}, std::vector<double>{0.3, -4.0, 1e-3}),
                                          Tensor<double>({1}, 2.0)};
  AdamOptions opts;
  opts.lr = 0.01;
  OptimizerState<double> state(opts);
  optimizer_step(params, grads, state);
  EXPECT_EQ(state.step, 1);
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].value.size(); ++i) {
      const double g = grads[p][i];
      const double delta = params[p].value[i] - before[p].value[i];
      EXPECT_NEAR(delta, -opts.lr * g / (std::abs(g) + opts.eps), 1e-12);
      EXPECT_LE(std::abs(delta), opts.lr * (1.0 + opts.eps));
      EXPECT_LT(delta * g, 0.0);
    }
  }
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  auto params = two_params();
  const auto before = params;
  OptimizerState<double> state;
  const std::vector<Tensor<double>> zeros{Tensor<double>({3}), Tensor<double>({1})};
  for (int i = 0; i < 5; ++i) optimizer_step(params, zeros, state);
  for (std::size_t p = 0; p < params.size(); ++p) EXPECT_EQ(params[p].value, before[p].value);
  EXPECT_EQ(state.step, 5);
}

TEST(Adam, MomentsTrackSecondStep) {
  std::vector<Parameter<double>> params{{"x", Tensor<double>({1}, 0.0)}};
  AdamOptions opts;
  opts.lr = 1.0;
  opts.eps = 0.0;
  OptimizerState<double> state(opts);
  optimizer_step(params, {Tensor<double>({1}, 1.0)}, state);
  optimizer_step(params, {Tensor<double>({1}, 3.0)}, state);
  const double m = (0.9 * 0.1 * 1.0 + 0.1 * 3.0) / (1.0 - 0.81);
  const double v = (0.999 * 0.001 * 1.0 + 0.001 * 9.0) / (1.0 - 0.999 * 0.999);
  EXPECT_NEAR(params[0].value[0], -1.0 - m / std::sqrt(v), 1e-12);
}

TEST(Adam, NonFiniteGradientAbortsWithoutSideEffects) {
  auto params = two_params();
  const auto before = params;
  OptimizerState<double> state;
  const std::vector<Tensor<double>> bad{Tensor<double>({3}, std::vector<double>{0.0, NAN, 0.0}), Tensor<double>({1})};
  EXPECT_THROW(optimizer_step(params, bad, state), NonFiniteError);
  EXPECT_EQ(state.step, 0);
  EXPECT_TRUE(state.first_moment.empty());
  for (std::size_t p = 0; p < params.size(); ++p) EXPECT_EQ(params[p].value, before[p].value);
}

TEST(Adam, ShapeAndCountChecks) {
  auto params = two_params();
  OptimizerState<double> state;
  EXPECT_THROW(optimizer_step(params, {Tensor<double>({3})}, state), std::invalid_argument);
  EXPECT_THROW(optimizer_step(params, {Tensor<double>({2}), Tensor<double>({1})}, state), std::invalid_argument);
  AdamOptions zero;
  zero.lr = 0.0;
  EXPECT_THROW(OptimizerState<double>{zero}, std::invalid_argument);
}

TEST(Plateau, HalvesOnceAfterPatienceRunsOut) {
  PlateauScheduler s;
  double lr = 2e-5;
  EXPECT_FALSE(s.step(1.0, lr));
  int reductions = 0;
  for (int epoch = 0; epoch < 11; ++epoch) reductions += s.step(1.0, lr) ? 1 : 0;
  EXPECT_EQ(reductions, 1);
  EXPECT_DOUBLE_EQ(lr, 1e-5);
}

TEST(Plateau, ImprovementResetsCounter) {
  PlateauScheduler s;
  s.patience = 2;
  double lr = 1.0;
  s.step(1.0, lr);
  s.step(1.0, lr);
  s.step(1.0, lr);
  s.step(0.5, lr);  // improvement
  EXPECT_EQ(s.bad_epochs, 0);
  s.step(0.5, lr);
  s.step(0.5, lr);
  EXPECT_EQ(lr, 1.0);
  EXPECT_TRUE(s.step(0.5, lr));
  EXPECT_EQ(lr, 0.5);
}

TEST(Plateau, TinyImprovementsBelowThresholdDoNotCount) {
  PlateauScheduler s;
  s.patience = 0;
  double lr = 1.0;
  s.step(1.0, lr);
  EXPECT_TRUE(s.step(1.0 - 1e-6, lr));
}

}  // namespace
}  // namespace mdd
