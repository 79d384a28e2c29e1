#include <gtest/gtest.h>

#include <cmath>

#include "simstex/diffusion.hpp"

using namespace simstex;

namespace {

LatentImage filled(float v, int c = 4) { return LatentImage(4, 4, c, v); }

// Scaled-linear betas and their cumulative product, computed independently.
std::vector<double> reference_alpha_bar(int T, double b0, double b1) {
  std::vector<double> ab(T + 1, 1.0);
  const double s0 = std::sqrt(b0), s1 = std::sqrt(b1);
  for (int t = 1; t <= T; ++t) {
    const double s = s0 + (s1 - s0) * (t - 1) / (T - 1);
    ab[t] = ab[t - 1] * (1 - s * s);
  }
  return ab;
}

}  // namespace

TEST(Schedule, DefaultLadder) {
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  EXPECT_EQ(s.steps(), 50);
  const auto sub = s.substeps();
  ASSERT_EQ(sub.size(), 50u);
  EXPECT_EQ(sub.front(), 1000);
  EXPECT_EQ(s.time(0), 300);
  for (std::size_t k = 1; k < sub.size(); ++k) EXPECT_LT(sub[k], sub[k - 1]);
  for (int t : sub) EXPECT_GT(t, 300);
  // floor spacing: time(k) = 300 + floor(k * 700 / 50) = 300 + 14k
  for (int i = 0; i <= 50; ++i) EXPECT_EQ(s.time(i), 300 + 14 * i);
}

TEST(Schedule, AlphaBarValues) {
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(0), 1.0);
  EXPECT_NEAR(s.alpha_bar_at(1), 0.99915, 1e-15);
  const auto ref = reference_alpha_bar(1000, 0.00085, 0.012);
  for (int t : {1, 2, 300, 500, 999, 1000}) EXPECT_NEAR(s.alpha_bar_at(t), ref[t], 1e-14);
  EXPECT_LT(s.alpha_bar_at(1000), s.alpha_bar_at(500));
  EXPECT_LT(s.alpha_bar_at(500), s.alpha_bar_at(1));
}

TEST(Schedule, RejectsBadParameters) {
  ScheduleParams p;
  p.S = 800;
  EXPECT_THROW(make_schedule(p), ScheduleError);
  p = {};
  p.t_min = 900;
  p.t_max = 800;
  EXPECT_THROW(make_schedule(p), ScheduleError);
  p = {};
  p.beta_end = 1.5;
  EXPECT_THROW(make_schedule(p), ScheduleError);
  EXPECT_THROW(make_schedule(ScheduleParams{}).time(51), ScheduleError);
}

TEST(Schedule, Json) {
  ScheduleParams p;
  p.S = 20;
  const nlohmann::json j = p;
  EXPECT_EQ(j.at("S"), 20);
  EXPECT_EQ(j.at("t_min"), 300);
  EXPECT_EQ(j.get<ScheduleParams>(), p);
}

TEST(DdimSigma, Examples) {
  EXPECT_EQ(ddim_sigma(0.25, 0.64, 0.0), 0.0);
  const double s1 = ddim_sigma(0.25, 0.64, 1.0);
  EXPECT_NEAR(s1, std::sqrt(0.36 / 0.75) * std::sqrt(1 - 0.390625), 1e-15);
  EXPECT_NEAR(s1, 0.5409, 1e-4);
  EXPECT_NEAR(ddim_sigma(0.25, 0.64, 0.5), s1 / 2, 1e-15);
}

TEST(DdimSigma, MatchesDdpmPosterior) {
  // For consecutive steps, the DDPM posterior variance is beta_tilde =
  // (1 - ab_prev) / (1 - ab) * beta_t with beta_t = 1 - ab / ab_prev.
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  for (int i = 1; i <= 50; ++i) {
    const double ab = s.alpha_bar(i), ap = s.alpha_bar(i - 1);
    const double beta_tilde = (1 - ap) / (1 - ab) * (1 - ab / ap);
    EXPECT_NEAR(ddim_sigma(s, i, 1.0), std::sqrt(beta_tilde), 1e-14);
  }
}

TEST(DdimStep, Examples) {
  NormalStream rng(0);
  const LatentImage a = ddim_step(filled(1.0f), filled(0.0f), DdimCoefficients{0.25, 0.64, 0.0}, 0.0, rng);
  for (float v : a.values()) EXPECT_NEAR(v, 1.6f, 1e-6f);
  const float xi = static_cast<float>(0.5 * 2 + std::sqrt(0.75));
  const LatentImage b = ddim_step(filled(xi), filled(1.0f), DdimCoefficients{0.25, 0.64, 0.0}, 0.7, rng);
  for (float v : b.values()) EXPECT_NEAR(v, 2.2f, 1e-6f);
}

TEST(DdimStep, StochasticTermVariance) {
  const double ab = 0.25, ap = 0.64, sigma = ddim_sigma(ab, ap, 1.0);
  NormalStream rng(17);
  const LatentImage x(1, 1, 100000, 0.5f), eps(1, 1, 100000, 0.0f);
  const LatentImage out = ddim_step(x, eps, DdimCoefficients{ab, ap, sigma}, 1.0, rng);
  const double mean_part = std::sqrt(ap) * 0.5 / std::sqrt(ab);
  double s = 0, s2 = 0;
  for (float v : out.values()) {
    const double d = v - mean_part;
    s += d;
    s2 += d * d;
  }
  const double n = 100000, var = s2 / n - (s / n) * (s / n);
  EXPECT_NEAR(var / (sigma * sigma), 1.0, 0.02);
}

TEST(DdimStep, NoNoiseDrawnWhenDeterministic) {
  NormalStream a(5), b(5);
  ddim_step(filled(1.0f), filled(0.1f), DdimCoefficients{0.25, 0.64, 0.3}, 0.0, a);
  EXPECT_EQ(a.next(), b.next());
}

TEST(DdimStep, RejectsBadInputs) {
  NormalStream rng(0);
  EXPECT_THROW(ddim_step(filled(1), filled(1, 3), DdimCoefficients{0.25, 0.64, 0}, 0, rng), ShapeError);
  EXPECT_THROW(ddim_step(filled(1), filled(1), DdimCoefficients{0.25, 0.64, 0}, 1.5, rng), ScheduleError);
  EXPECT_THROW(ddim_step(filled(1), filled(1), DdimCoefficients{0.25, 0.64, 0.9}, 0, rng), ScheduleError);
}

TEST(DdimStep, DeltaDataReachesTarget) {
  // Exact eps for delta data x0: eps = (x - sqrt(ab) x0) / sqrt(1 - ab).
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  LatentImage target(8, 8, 4);
  NormalStream(3).fill(target.values());
  LatentImage x(8, 8, 4);
  NormalStream(4).fill(x.values());
  LatentImage x0;
  NormalStream rng(9);
  for (int i = s.steps(); i >= 1; --i) {
    const double ab = s.alpha_bar(i);
    LatentImage eps(8, 8, 4);
    for (std::size_t n = 0; n < x.size(); ++n)
      eps.raw()[n] = static_cast<float>((x.raw()[n] - std::sqrt(ab) * target.raw()[n]) / std::sqrt(1 - ab));
    x0 = predict_x0(x, eps, s, i);
    x = ddim_step(x, eps, s, i, 0.0, 0.5, rng);
  }
  for (std::size_t n = 0; n < x0.size(); ++n) EXPECT_NEAR(x0.raw()[n], target.raw()[n], 1e-3);
}

TEST(DdimStep, MarginalPreservedForUnitData) {
  // Unit-variance Gaussian data with its exact eps, eps = sqrt(1 - ab) x, so
  // one step maps Var -> c^2 Var + sigma^2 with
  // c = sqrt(ab_prev ab) + sqrt(1 - ab_prev - sigma^2) sqrt(1 - ab).
  // The Monte Carlo variance must follow that recursion, which itself stays
  // close to 1 (the finite-step discretization error).
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  LatentImage x(1, 1, 200000);
  NormalStream(1).fill(x.values());
  NormalStream rng(2);
  double expected = 1.0;
  for (int i = s.steps(); i >= 1; --i) {
    const double ab = s.alpha_bar(i), ap = s.alpha_bar(i - 1), sigma = ddim_sigma(s, i, 1.0);
    const double c = std::sqrt(ap * ab) + std::sqrt(1 - ap - sigma * sigma) * std::sqrt(1 - ab);
    expected = c * c * expected + sigma * sigma;
    LatentImage eps = x;
    const double k = std::sqrt(1 - ab);
    for (float& v : eps.values()) v = static_cast<float>(v * k);
    x = ddim_step(x, eps, s, i, 1.0, 1.0, rng);
    double s2 = 0;
    for (float v : x.values()) s2 += double(v) * v;
    EXPECT_NEAR(s2 / x.size() / expected, 1.0, 0.02) << "step " << i;
    EXPECT_NEAR(expected, 1.0, 0.05) << "step " << i;
  }
}

TEST(PredictX0, Examples) {
  const float xi = static_cast<float>(0.5 * 2 + std::sqrt(0.75));
  const LatentImage a = predict_x0(filled(xi), filled(1.0f), 0.25);
  for (float v : a.values()) EXPECT_NEAR(v, 2.0f, 1e-6f);
  const LatentImage b = predict_x0(filled(1.5f), filled(0.0f), 0.25);
  for (float v : b.values()) EXPECT_FLOAT_EQ(v, 3.0f);
  // Nearest-to-one step of the ladder: exact noising round trip.
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  const double ab = s.alpha_bar(1);
  const float x0 = 0.8f, e = -1.3f;
  const float xt = static_cast<float>(std::sqrt(ab) * x0 + std::sqrt(1 - ab) * e);
  const LatentImage c = predict_x0(filled(xt), filled(e), s, 1);
  for (float v : c.values()) EXPECT_NEAR(v, x0, 1e-5f);
}

TEST(CfgCombine, Examples) {
  const LatentImage u = filled(0.0f), j = filled(1.0f), v = filled(0.37f);
  EXPECT_EQ(cfg_combine(filled(0.3f), j, nullptr, GuidanceConfig{1.0, 0.0}), j);
  const LatentImage five = cfg_combine(u, j, nullptr, GuidanceConfig{5.0, 0.0});
  for (float x : five.values()) EXPECT_FLOAT_EQ(x, 5.0f);
  const LatentImage same = cfg_combine(v, v, &v, GuidanceConfig{5.0, 3.0});
  for (float x : same.values()) EXPECT_NEAR(x, 0.37f, 1e-6f);
}

TEST(CfgCombine, Errors) {
  const LatentImage a = filled(0.0f);
  EXPECT_THROW(cfg_combine(a, a, nullptr, GuidanceConfig{5.0, 1.0}), GuidanceError);
  EXPECT_THROW(cfg_combine(a, a, nullptr, GuidanceConfig{-1.0, 0.0}), GuidanceError);
  EXPECT_THROW(cfg_combine(a, filled(0, 3), nullptr, GuidanceConfig{}), ShapeError);
}

TEST(StochasticEncode, Limits) {
  NormalStream rng(1);
  const LatentImage x = filled(0.42f);
  EXPECT_EQ(stochastic_encode(x, make_schedule(ScheduleParams{}), 0, rng), x);
  NormalStream a(8), b(8);
  EXPECT_EQ(stochastic_encode(x, 0.3, a), stochastic_encode(x, 0.3, b));
}

TEST(StochasticEncode, ZeroDataVariance) {
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  const double ab = s.alpha_bar_at(500);
  NormalStream rng(12);
  const Grid<float> out = stochastic_encode(Grid<float>(1, 1, 100000, 0.0f), ab, rng);
  double s2 = 0;
  for (float v : out.values()) s2 += double(v) * v;
  EXPECT_NEAR(s2 / 100000 / (1 - ab), 1.0, 0.02);
}
