#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mdd/schedule.hpp"

namespace mdd {
namespace {

// Product of (1 - beta_t) over the default linear betas, evaluated
// independently with 50-digit arithmetic.
constexpr double kAlphaBar1000 = 4.0358297653756833e-5;
constexpr double kSqrtAlphaBar1000 = 0.0063528180875700221;
constexpr double kSqrtOneMinusAlphaBar1000 = 0.99997982064756999;

TEST(Schedule, EndpointValues) {
  const NoiseSchedule s = make_linear_schedule();
  EXPECT_EQ(s.steps(), 1000);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9999);
  EXPECT_NEAR(s.alpha_bar(1000), kAlphaBar1000, 1e-6 * kAlphaBar1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
}

TEST(Schedule, TableInvariants) {
  const NoiseSchedule s = make_linear_schedule();
  for (int t = 1; t <= s.steps(); ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
    if (t > 1) {
      EXPECT_GE(s.beta(t), s.beta(t - 1));
    }
    EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_EQ(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
  }
  EXPECT_LT(s.alpha_bar(1000), 1e-4);
  EXPECT_GT(s.alpha_bar(1000), 0.0);
}

TEST(Schedule, SingleStepAndCustomRange) {
  const NoiseSchedule one(1, 0.3, 0.3);
  EXPECT_DOUBLE_EQ(one.alpha_bar(1), 0.7);
  const NoiseSchedule s(5, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(s.beta(3), 0.3);
  EXPECT_NEAR(s.alpha_bar(5), 0.9 * 0.8 * 0.7 * 0.6 * 0.5, 1e-15);
}

TEST(Schedule, RejectsInvalidParameters) {
  EXPECT_THROW(NoiseSchedule(0, 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule(-3, 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule(10, 0.03, 0.02), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule(10, 1e-4, 1.0), std::invalid_argument);
}

TEST(Schedule, PosteriorVariance) {
  const NoiseSchedule s = make_linear_schedule();
  EXPECT_EQ(s.posterior_variance(1), 0.0);
  for (int t = 2; t <= 1000; t += 97) {
    EXPECT_GT(s.posterior_variance(t), 0.0);
    EXPECT_LT(s.posterior_variance(t), s.beta(t));
  }
  EXPECT_THROW(s.posterior_variance(0), std::out_of_range);
}

TEST(TimestepVector, RangeChecked) {
  EXPECT_NO_THROW(TimestepVector({0, 1000, 5}, 1000));
  EXPECT_THROW(TimestepVector({-1, 3}, 1000), std::out_of_range);
  EXPECT_THROW(TimestepVector({1001}, 1000), std::out_of_range);
  const TimestepVector f = TimestepVector::filled(3, 7, 1000);
  EXPECT_EQ(f, TimestepVector({7, 7, 7}, 1000));
}

TEST(BuildTVector, Examples) {
  const std::vector<std::uint8_t> partial{1, 0, 1};
  EXPECT_EQ(build_tvector(partial, TimestepVector({17, 884, 3}, 1000), 1000), TimestepVector({17, 1000, 3}, 1000));
  const std::vector<std::uint8_t> full{1, 1, 1};
  EXPECT_EQ(build_tvector(full, TimestepVector({5, 5, 5}, 1000), 1000), TimestepVector({5, 5, 5}, 1000));
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_EQ(build_tvector(none, TimestepVector({1, 2, 3}, 1000), 1000), TimestepVector({1000, 1000, 1000}, 1000));
}

TEST(BuildTVector, IdempotentForEveryMask) {
  const TimestepVector t({12, 400, 999}, 1000);
  for (int p = 0; p < 8; ++p) {
    const std::vector<std::uint8_t> mask{static_cast<std::uint8_t>(p & 1), static_cast<std::uint8_t>((p >> 1) & 1),
                                         static_cast<std::uint8_t>((p >> 2) & 1)};
    const TimestepVector once = build_tvector(mask, t, 1000);
    EXPECT_EQ(build_tvector(mask, once, 1000), once);
  }
}

TEST(BuildTVector, LengthMismatchThrows) {
  const std::vector<std::uint8_t> mask{1, 0};
  EXPECT_THROW(build_tvector(mask, TimestepVector({1, 2, 3}, 1000), 1000), std::invalid_argument);
}

TEST(GatherCoefficients, Examples) {
  const NoiseSchedule s = make_linear_schedule();
  const auto c = gather_coefficients(s, TimestepVector({0, 1000}, 1000));
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].signal, 1.0);
  EXPECT_EQ(c[0].noise, 0.0);
  EXPECT_NEAR(c[1].signal, kSqrtAlphaBar1000, 1e-9);
  EXPECT_NEAR(c[1].noise, kSqrtOneMinusAlphaBar1000, 1e-12);
}

TEST(GatherCoefficients, SquaresSumToOne) {
  const NoiseSchedule s = make_linear_schedule();
  for (int t = 0; t <= 1000; ++t) {
    const NoiseCoefficients c = coefficients_at(s, t);
    EXPECT_NEAR(c.signal * c.signal + c.noise * c.noise, 1.0, 1e-6);
    EXPECT_GE(c.signal, 0.0);
    EXPECT_LE(c.signal, 1.0);
  }
  EXPECT_THROW(coefficients_at(s, 1001), std::out_of_range);
  EXPECT_THROW(coefficients_at(s, -1), std::out_of_range);
}

}  // namespace
}  // namespace mdd
