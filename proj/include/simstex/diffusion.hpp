#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include <json.hpp>

#include "simstex/core.hpp"

namespace simstex {

struct ScheduleParams {
  int T = 1000;
  int S = 50;
  int t_min = 300;
  int t_max = 1000;
  double beta_start = 0.00085;
  double beta_end = 0.012;
  bool operator==(const ScheduleParams&) const = default;
};

/// Cumulative signal retention over 1-based diffusion times, with the t = 0
/// extension alpha_bar(0) = 1, plus the truncated substep ladder.
///
/// Step i runs from time(i) to time(i - 1) for i = S..1; time(S) = t_max and
/// time(0) = t_min, so t_min is the target of the final step.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> alpha_bar, std::vector<int> times, ScheduleParams params)
      : alpha_bar_(std::move(alpha_bar)), times_(std::move(times)), params_(params) {}

  const ScheduleParams& params() const { return params_; }
  int steps() const { return params_.S; }

  /// alpha_bar at an absolute diffusion time in [0, T].
  double alpha_bar_at(int t) const {
    if (t < 0 || t >= static_cast<int>(alpha_bar_.size())) throw ScheduleError("time out of range");
    return alpha_bar_[static_cast<std::size_t>(t)];
  }
  /// Diffusion time of ladder index i in [0, S].
  int time(int i) const {
    if (i < 0 || i > params_.S) throw ScheduleError("step index out of range");
    return times_[static_cast<std::size_t>(i)];
  }
  double alpha_bar(int i) const { return alpha_bar_at(time(i)); }

  /// Input times of the S denoising steps in execution order (descending).
  std::vector<int> substeps() const { return {times_.rbegin(), times_.rend() - 1}; }
  const std::vector<double>& alpha_bar_table() const { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
  std::vector<int> times_;  // times_[i] = time(i), ascending
  ScheduleParams params_;
};

/// Scaled-linear beta schedule (linear in sqrt(beta)) and S uniformly spaced
/// integer steps over [t_min, t_max], floored.
inline NoiseSchedule make_schedule(const ScheduleParams& p) {
  if (p.T < 1 || p.S < 1 || p.S > p.T) throw ScheduleError("need T >= S >= 1");
  if (p.t_min < 0 || p.t_min >= p.t_max || p.t_max > p.T) throw ScheduleError("need 0 <= t_min < t_max <= T");
  if (p.t_max - p.t_min < p.S) throw ScheduleError("truncation range too short for S distinct steps");
  if (!(p.beta_start > 0 && p.beta_end < 1 && p.beta_start <= p.beta_end))
    throw ScheduleError("betas must satisfy 0 < beta_start <= beta_end < 1");
  std::vector<double> ab(static_cast<std::size_t>(p.T) + 1);
  ab[0] = 1.0;
  const double s0 = std::sqrt(p.beta_start), s1 = std::sqrt(p.beta_end);
  for (int t = 1; t <= p.T; ++t) {
    const double frac = p.T == 1 ? 0.0 : static_cast<double>(t - 1) / (p.T - 1);
    const double sb = s0 + (s1 - s0) * frac;
    ab[static_cast<std::size_t>(t)] = ab[static_cast<std::size_t>(t) - 1] * (1.0 - sb * sb);
  }
  std::vector<int> times(static_cast<std::size_t>(p.S) + 1);
  const long long range = p.t_max - p.t_min;
  for (int k = 0; k <= p.S; ++k) times[static_cast<std::size_t>(k)] = p.t_min + static_cast<int>(k * range / p.S);
  return NoiseSchedule(std::move(ab), std::move(times), p);
}

inline void to_json(nlohmann::json& j, const ScheduleParams& p) {
  j = {{"T", p.T}, {"S", p.S}, {"t_min", p.t_min}, {"t_max", p.t_max},
       {"beta_start", p.beta_start}, {"beta_end", p.beta_end}};
}
inline void from_json(const nlohmann::json& j, ScheduleParams& p) {
  p = ScheduleParams{};
  if (j.contains("T")) j.at("T").get_to(p.T);
  if (j.contains("S")) j.at("S").get_to(p.S);
  if (j.contains("t_min")) j.at("t_min").get_to(p.t_min);
  if (j.contains("t_max")) j.at("t_max").get_to(p.t_max);
  if (j.contains("beta_start")) j.at("beta_start").get_to(p.beta_start);
  if (j.contains("beta_end")) j.at("beta_end").get_to(p.beta_end);
}

// ---------------------------------------------------------------------------
// DDIM

/// eta * sqrt((1 - ab_prev) / (1 - ab)) * sqrt(1 - ab / ab_prev)
inline double ddim_sigma(double ab, double ab_prev, double eta) {
  if (eta == 0.0) return 0.0;
  return eta * std::sqrt((1 - ab_prev) / (1 - ab)) * std::sqrt(1 - ab / ab_prev);
}

inline double ddim_sigma(const NoiseSchedule& sched, int i, double eta) {
  return ddim_sigma(sched.alpha_bar(i), sched.alpha_bar(i - 1), eta);
}

/// Scalar coefficients of one DDIM transition.
struct DdimCoefficients {
  double ab, ab_prev, sigma;
};

/// x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps + tau * sigma * noise,
/// x0_hat = (x - sqrt(1 - ab) * eps) / sqrt(ab). `noise` is only drawn when
/// tau * sigma is nonzero.
inline LatentImage ddim_step(const LatentImage& x, const LatentImage& eps, const DdimCoefficients& k, double tau,
                             NormalStream& noise) {
  require_same_shape(x, eps, "ddim_step");
  if (tau < 0 || tau > 1) throw ScheduleError("temperature must lie in [0, 1]");
  double dir2 = 1 - k.ab_prev - k.sigma * k.sigma;
  if (dir2 < 0) {
    if (dir2 < -1e-12) throw ScheduleError("1 - ab_prev - sigma^2 is negative");
    dir2 = 0;
  }
  const double sa = std::sqrt(k.ab), s1a = std::sqrt(1 - k.ab);
  const double sap = std::sqrt(k.ab_prev), dir = std::sqrt(dir2);
  const double stoch = tau * k.sigma;
  LatentImage out(x.height(), x.width(), x.channels());
  const auto xv = x.values();
  const auto ev = eps.values();
  auto ov = out.values();
  for (std::size_t n = 0; n < xv.size(); ++n) {
    const double e = ev[n];
    const double x0 = (xv[n] - s1a * e) / sa;
    double v = sap * x0 + dir * e;
    if (stoch != 0.0) v += stoch * noise.next();
    ov[n] = static_cast<float>(v);
  }
  return out;
}

inline LatentImage ddim_step(const LatentImage& x, const LatentImage& eps, const NoiseSchedule& sched, int i,
                             double eta, double tau, NormalStream& noise) {
  const DdimCoefficients k{sched.alpha_bar(i), sched.alpha_bar(i - 1), ddim_sigma(sched, i, eta)};
  return ddim_step(x, eps, k, tau, noise);
}

/// (x - sqrt(1 - ab) * eps) / sqrt(ab), elementwise.
inline LatentImage predict_x0(const LatentImage& x, const LatentImage& eps, double ab) {
  require_same_shape(x, eps, "predict_x0");
  const double sa = std::sqrt(ab), s1a = std::sqrt(1 - ab);
  LatentImage out(x.height(), x.width(), x.channels());
  const auto xv = x.values();
  const auto ev = eps.values();
  auto ov = out.values();
  for (std::size_t n = 0; n < xv.size(); ++n) ov[n] = static_cast<float>((xv[n] - s1a * ev[n]) / sa);
  return out;
}

inline LatentImage predict_x0(const LatentImage& x, const LatentImage& eps, const NoiseSchedule& sched, int i) {
  return predict_x0(x, eps, sched.alpha_bar(i));
}

// ---------------------------------------------------------------------------
// Classifier-free guidance

struct GuidanceConfig {
  double w_joint = 5.0;
  double w_text = 0.0;
  bool operator==(const GuidanceConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const GuidanceConfig& g) { j = {{"w_joint", g.w_joint}, {"w_text", g.w_text}}; }
inline void from_json(const nlohmann::json& j, GuidanceConfig& g) {
  g = GuidanceConfig{};
  if (j.contains("w_joint")) j.at("w_joint").get_to(g.w_joint);
  if (j.contains("w_text")) j.at("w_text").get_to(g.w_text);
}

/// (1 - w_joint - w_text) * uncond + w_joint * joint + w_text * text.
inline LatentImage cfg_combine(const LatentImage& uncond, const LatentImage& joint, const LatentImage* text,
                               const GuidanceConfig& cfg) {
  if (cfg.w_joint < 0 || cfg.w_text < 0) throw GuidanceError("guidance weights must be non-negative");
  if (cfg.w_text > 0 && text == nullptr) throw GuidanceError("w_text > 0 requires a text-only prediction");
  require_same_shape(uncond, joint, "cfg_combine");
  const bool use_text = cfg.w_text > 0;
  if (use_text) require_same_shape(uncond, *text, "cfg_combine");
  const double wu = 1.0 - cfg.w_joint - (use_text ? cfg.w_text : 0.0);
  LatentImage out(uncond.height(), uncond.width(), uncond.channels());
  const auto u = uncond.values();
  const auto jv = joint.values();
  auto o = out.values();
  for (std::size_t n = 0; n < u.size(); ++n) {
    double v = wu * u[n] + cfg.w_joint * jv[n];
    if (use_text) v += cfg.w_text * text->values()[n];
    o[n] = static_cast<float>(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward process

/// sqrt(ab) * x + sqrt(1 - ab) * noise with fresh noise in storage order.
inline Grid<float> stochastic_encode(const Grid<float>& x, double ab, NormalStream& noise) {
  const double sa = std::sqrt(ab), s1a = std::sqrt(1 - ab);
  Grid<float> out(x.height(), x.width(), x.channels());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t n = 0; n < xv.size(); ++n) ov[n] = static_cast<float>(sa * xv[n] + s1a * noise.next());
  return out;
}

inline Grid<float> stochastic_encode(const Grid<float>& x, const NoiseSchedule& sched, int t, NormalStream& noise) {
  return stochastic_encode(x, sched.alpha_bar_at(t), noise);
}

}  // namespace simstex
