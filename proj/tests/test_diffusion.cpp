#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "unidiff/diffusion.hpp"
#include "unidiff/rng.hpp"

using namespace unidiff;

namespace {

Tensor<double> scalar(double v) { return Tensor<double>({1}, std::vector<double>{v}); }

struct Moments {
  double mean, var;
};

Moments moments(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, v / static_cast<double>(xs.size() - 1)};
}

// |empirical - expected| within 4 standard errors for both moments.
void expect_moments(const std::vector<double>& xs, double mean, double var) {
  const Moments m = moments(xs);
  const double n = static_cast<double>(xs.size());
  EXPECT_LE(std::abs(m.mean - mean), 4 * std::sqrt(var / n)) << "mean " << m.mean << " expected " << mean;
  EXPECT_LE(std::abs(m.var - var), 4 * var * std::sqrt(2.0 / (n - 1))) << "var " << m.var << " expected " << var;
}

}  // namespace

TEST(Schedule, DefaultHasThousandStepsAndNearIsotropicEnd) {
  const NoiseSchedule s = default_schedule();
  EXPECT_EQ(s.t_max(), 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
  EXPECT_LT(s.alpha_bar(1000), 0.01);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, IdentitiesHoldForEveryStep) {
  for (const NoiseSchedule& s : {default_schedule(), build_schedule(10, 0.1, 0.1), build_schedule(7, 0.01, 0.5)}) {
    for (int t = 1; t <= s.t_max(); ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
      const double expect = s.alpha_bar(t - 1) * s.alpha(t);
      EXPECT_LE(std::abs(s.alpha_bar(t) - expect), 1e-12 * expect);
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
}

TEST(Schedule, LinearInterpolationOfBeta) {
  const NoiseSchedule s = build_schedule(5, 0.1, 0.5);
  const double expect[] = {0.1, 0.2, 0.3, 0.4, 0.5};
  for (int t = 1; t <= 5; ++t) EXPECT_NEAR(s.beta(t), expect[t - 1], 1e-15);
}

TEST(Schedule, ConstantBetaMatchesProductLoop) {
  const NoiseSchedule s = build_schedule(10, 0.1, 0.1);
  double prod = 1;
  for (int i = 0; i < 10; ++i) prod *= 0.9;
  EXPECT_NEAR(s.alpha_bar(10), prod, 1e-15);
  EXPECT_NEAR(s.alpha_bar(10), std::pow(0.9, 10), 1e-15);
}

TEST(Schedule, NearZeroBetaIsNearIdentity) {
  const NoiseSchedule s = build_schedule(3, 1e-12, 1e-12);
  EXPECT_NEAR(s.alpha_bar(3), 1.0, 1e-11);
  const auto z = forward_to(LatentState<double>{scalar(0.7), 0}, 3, scalar(1.3), s);
  EXPECT_NEAR(z.values[0], 0.7, 1e-5);
}

TEST(Schedule, ReverseVarianceIsBetaExceptLastStep) {
  const NoiseSchedule s = default_schedule();
  EXPECT_EQ(s.sigma_sq(1), 0.0);
  for (int t : {2, 500, 1000}) EXPECT_EQ(s.sigma_sq(t), s.beta(t));
}

TEST(Schedule, RejectsInvalidBounds) {
  EXPECT_THROW(build_schedule(0, 1e-4, 0.02), ParameterError);
  EXPECT_THROW(build_schedule(10, 0.0, 0.02), ParameterError);
  EXPECT_THROW(build_schedule(10, 0.03, 0.02), ParameterError);
  EXPECT_THROW(build_schedule(10, 1e-4, 1.0), ParameterError);
  try {
    build_schedule(10, 1e-4, 1.5);
    FAIL();
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("beta_end"), std::string::npos);
  }
}

TEST(ForwardStep, ScalarValue) {
  // beta_1 = 0.19 on a one-step schedule
  const NoiseSchedule s = build_schedule(1, 0.19, 0.19);
  const auto z = forward_step(LatentState<double>{scalar(1.0), 0}, 1, scalar(1.0), s);
  EXPECT_NEAR(z.values[0], 0.9 + std::sqrt(0.19), 1e-15);
  EXPECT_EQ(z.t, 1);
}

TEST(ForwardStep, TinyBetaIsIdentity) {
  const NoiseSchedule s = build_schedule(1, 1e-14, 1e-14);
  const auto z = forward_step(LatentState<double>{scalar(-2.5), 0}, 1, scalar(3.0), s);
  EXPECT_NEAR(z.values[0], -2.5, 1e-6);
}

TEST(ForwardStep, ShapeMismatchThrows) {
  const NoiseSchedule s = default_schedule();
  EXPECT_THROW(forward_step(LatentState<double>{Tensor<double>({2}), 0}, 1, Tensor<double>({3}), s), ShapeError);
  EXPECT_THROW(forward_to(LatentState<double>{Tensor<double>({2}), 0}, 1, Tensor<double>({3}), s), ShapeError);
}

TEST(ForwardTo, ScalarValue) {
  // alpha_bar = 0.64 from a one-step schedule with beta = 0.36
  const NoiseSchedule s = build_schedule(1, 0.36, 0.36);
  const auto z = forward_to(LatentState<double>{scalar(1.0), 0}, 1, scalar(0.5), s);
  EXPECT_NEAR(z.values[0], 1.1, 1e-15);
}

TEST(ForwardTo, TimeZeroReturnsInput) {
  const NoiseSchedule s = default_schedule();
  Tensor<double> z0({3}, std::vector<double>{0.1, -0.4, 2.0});
  const auto z = forward_to(LatentState<double>{z0, 0}, 0, Tensor<double>({3}, 9.0), s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(z.values[i], z0[i]);
}

TEST(ForwardTo, MomentsMatchClosedForm) {
  const NoiseSchedule s = default_schedule();
  const double z0 = 0.8;
  Rng rng = make_rng(11, 0);
  for (int t : {1, 500, 1000}) {
    std::vector<double> xs;
    for (int i = 0; i < 10000; ++i)
      xs.push_back(forward_to(LatentState<double>{scalar(z0), 0}, t, randn<double>(rng, {1}), s).values[0]);
    expect_moments(xs, std::sqrt(s.alpha_bar(t)) * z0, 1 - s.alpha_bar(t));
  }
}

TEST(ForwardTo, TerminalStatisticsNearStandardNormal) {
  const NoiseSchedule s = default_schedule();
  Rng rng = make_rng(12, 0);
  std::vector<double> xs;
  for (int i = 0; i < 10000; ++i)
    xs.push_back(forward_to(LatentState<double>{scalar(1.0), 0}, 1000, randn<double>(rng, {1}), s).values[0]);
  const Moments m = moments(xs);
  EXPECT_LT(std::abs(m.mean), 0.1 + 4 / std::sqrt(1e4));
  EXPECT_NEAR(m.var, 1.0, 0.06);
}

TEST(ForwardStep, ChainMatchesClosedFormMoments) {
  const NoiseSchedule s = default_schedule();
  const double z0 = -0.6;
  Rng rng = make_rng(13, 0);
  for (int t : {1, 50, 500}) {
    std::vector<double> xs;
    for (int i = 0; i < 10000; ++i) {
      LatentState<double> z{scalar(z0), 0};
      for (int k = 1; k <= t; ++k) z = forward_step(z, k, randn<double>(rng, {1}), s);
      xs.push_back(z.values[0]);
    }
    expect_moments(xs, std::sqrt(s.alpha_bar(t)) * z0, 1 - s.alpha_bar(t));
  }
}

TEST(ReverseStep, ZeroNoiseTermsScaleByInverseRootAlpha) {
  const NoiseSchedule s = default_schedule();
  const auto z = reverse_step(LatentState<double>{scalar(1.7), 300}, 300, scalar(0.0), scalar(0.0), s);
  EXPECT_NEAR(z.values[0], 1.7 / std::sqrt(s.alpha(300)), 1e-15);
  EXPECT_EQ(z.t, 299);
}

TEST(ReverseStep, ScalarValue) {
  // Constant beta = 0.01 gives alpha_t = 0.99; pick the first step where alpha_bar drops to about 0.5.
  const NoiseSchedule s = build_schedule(100, 0.01, 0.01);
  int t = 1;
  while (s.alpha_bar(t) > 0.5) ++t;
  const double ab = std::pow(0.99, t);
  const double expect = (1.0 - 0.01 * 0.2 / std::sqrt(1 - ab)) / std::sqrt(0.99);
  const auto z = reverse_step(LatentState<double>{scalar(1.0), t}, t, scalar(0.2), scalar(0.0), s);
  EXPECT_NEAR(z.values[0], expect, 1e-13);
}

TEST(ReverseStep, LastStepIsDeterministic) {
  const NoiseSchedule s = default_schedule();
  const auto a = reverse_step(LatentState<double>{scalar(0.3), 1}, 1, scalar(0.1), scalar(5.0), s);
  const auto b = reverse_step(LatentState<double>{scalar(0.3), 1}, 1, scalar(0.1), scalar(-5.0), s);
  EXPECT_EQ(a.values[0], b.values[0]);
}

TEST(ReverseStep, NoiseEntersWithSigma) {
  const NoiseSchedule s = default_schedule();
  const auto a = reverse_step(LatentState<double>{scalar(0.3), 400}, 400, scalar(0.1), scalar(0.0), s);
  const auto b = reverse_step(LatentState<double>{scalar(0.3), 400}, 400, scalar(0.1), scalar(1.0), s);
  EXPECT_NEAR(b.values[0] - a.values[0], std::sqrt(s.beta(400)), 1e-15);
}

TEST(ReverseStep, RejectsTimeZero) {
  const NoiseSchedule s = default_schedule();
  EXPECT_THROW(reverse_step(LatentState<double>{scalar(0.3), 0}, 0, scalar(0), scalar(0), s), ParameterError);
  EXPECT_THROW(reverse_step(LatentState<double>{scalar(0.3), 0}, 1001, scalar(0), scalar(0), s), ParameterError);
}

TEST(PredictZ0, InvertsForwardWithTrueNoise) {
  const NoiseSchedule s = default_schedule();
  Rng rng = make_rng(5, 0);
  const Tensor<double> z0 = randn<double>(rng, {3, 8, 8});
  for (int t : {1, 500, 999}) {
    const Tensor<double> eps = randn<double>(rng, {3, 8, 8});
    const auto zt = forward_to(LatentState<double>{z0, 0}, t, eps, s);
    const auto back = predict_z0(zt, t, eps, s);
    double worst = 0;
    for (std::size_t i = 0; i < z0.size(); ++i) worst = std::max(worst, std::abs(back.values[i] - z0[i]));
    EXPECT_LE(worst, 1e-9) << "t=" << t;
    EXPECT_EQ(back.t, 0);
  }
}

TEST(PredictZ0, ZeroNoiseEstimateRecoversScaledConstant) {
  const NoiseSchedule s = default_schedule();
  const double c = 0.42;
  const auto back = predict_z0(LatentState<double>{scalar(std::sqrt(s.alpha_bar(200)) * c), 200}, 200, scalar(0), s);
  EXPECT_NEAR(back.values[0], c, 1e-14);
}

TEST(PredictZ0, IllConditionedScheduleThrows) {
  const NoiseSchedule s = build_schedule(1000, 0.5, 0.5);
  EXPECT_THROW(predict_z0(LatentState<double>{scalar(1), 900}, 900, scalar(0), s), NumericalError);
}
