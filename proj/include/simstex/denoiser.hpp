#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "simstex/diffusion.hpp"
#include "simstex/geometry.hpp"
#include "simstex/rasterizer.hpp"

namespace simstex {

enum class Conditioning { unconditional, joint, text_only };

/// One epsilon query. `t` is the 1-based diffusion time and `alpha_bar` its
/// cumulative retention; `camera` and `camera_id` identify the view.
struct DenoiseRequest {
  LatentImage latents;
  int t = 0;
  double alpha_bar = 1.0;
  ScalarGrid depth;
  std::string prompt;
  std::string view_suffix;
  GuidanceConfig guidance;
  Conditioning conditioning = Conditioning::joint;
  int camera_id = 0;
  Camera camera;
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;

  /// Raw epsilon prediction under req.conditioning.
  virtual LatentImage predict_epsilon(const DenoiseRequest& req) = 0;

  /// Guided prediction: queries the unconditional, joint and (when
  /// w_text > 0) text-only branches and combines them.
  virtual LatentImage guided_epsilon(const DenoiseRequest& req) {
    DenoiseRequest q = req;
    q.conditioning = Conditioning::unconditional;
    const LatentImage uncond = predict_epsilon(q);
    q.conditioning = Conditioning::joint;
    const LatentImage joint = predict_epsilon(q);
    if (req.guidance.w_text > 0) {
      q.conditioning = Conditioning::text_only;
      const LatentImage text = predict_epsilon(q);
      return cfg_combine(uncond, joint, &text, req.guidance);
    }
    return cfg_combine(uncond, joint, nullptr, req.guidance);
  }

  virtual std::string describe() const = 0;
};

class ZeroDenoiser final : public Denoiser {
 public:
  LatentImage predict_epsilon(const DenoiseRequest& req) override {
    return LatentImage(req.latents.height(), req.latents.width(), req.latents.channels(), 0.0f);
  }
  std::string describe() const override { return "zero"; }
};

/// (x_t - sqrt(ab) * x0) / sqrt(1 - ab): the exact noise for a point-mass
/// data distribution at x0.
inline LatentImage delta_oracle_epsilon(const LatentImage& x0, const LatentImage& xt, double ab) {
  require_same_shape(x0, xt, "delta_oracle_epsilon");
  const double sa = std::sqrt(ab), s1a = std::sqrt(1 - ab);
  LatentImage eps(xt.height(), xt.width(), xt.channels());
  for (std::size_t n = 0; n < eps.size(); ++n)
    eps.raw()[n] = static_cast<float>((xt.raw()[n] - sa * x0.raw()[n]) / s1a);
  return eps;
}

/// Point-mass oracle. Targets are either registered per camera id, or
/// rendered on demand from a target texture with the request's camera pose
/// (so jittered cameras still have ground truth). Rendered targets are zero
/// on background pixels.
class DeltaOracle final : public Denoiser {
 public:
  DeltaOracle() = default;

  static DeltaOracle from_texture(TriMesh mesh, LatentTexture target) {
    DeltaOracle o;
    o.mesh_ = std::move(mesh);
    o.texture_ = std::move(target);
    return o;
  }

  void register_target(int camera_id, LatentImage x0) { targets_[camera_id] = std::move(x0); }

  LatentImage target_for(const DenoiseRequest& req) const {
    if (auto it = targets_.find(req.camera_id); it != targets_.end()) return it->second;
    if (texture_) {
      const RasterOutput r = rasterize(*mesh_, req.camera, texture_->height(), texture_->width());
      return render_texture(*texture_, r);
    }
    throw OracleError("no target registered for camera " + std::to_string(req.camera_id));
  }

  LatentImage predict_epsilon(const DenoiseRequest& req) override {
    return delta_oracle_epsilon(target_for(req), req.latents, req.alpha_bar);
  }

  /// Each guided query would otherwise re-render the target per branch.
  LatentImage guided_epsilon(const DenoiseRequest& req) override {
    const LatentImage x0 = target_for(req);
    const LatentImage eps = delta_oracle_epsilon(x0, req.latents, req.alpha_bar);
    return cfg_combine(eps, eps, req.guidance.w_text > 0 ? &eps : nullptr, req.guidance);
  }

  std::string describe() const override { return texture_ ? "delta:texture" : "delta:per-camera"; }

 private:
  std::map<int, LatentImage> targets_;
  std::optional<TriMesh> mesh_;
  std::optional<LatentTexture> texture_;
};

/// Per-channel Gaussian data model N(mu, s^2). A single entry broadcasts to
/// every channel.
struct GaussianOracleParams {
  std::vector<double> mu{0.0};
  std::vector<double> s{1.0};

  double mu_at(int c) const { return mu.size() == 1 ? mu[0] : mu.at(static_cast<std::size_t>(c)); }
  double s_at(int c) const { return s.size() == 1 ? s[0] : s.at(static_cast<std::size_t>(c)); }
};

/// sqrt(1 - ab) * (x_t - sqrt(ab) * mu) / (ab * s^2 + 1 - ab)
inline LatentImage gaussian_oracle_epsilon(const GaussianOracleParams& p, const LatentImage& xt, double ab) {
  const double sa = std::sqrt(ab), s1a = std::sqrt(1 - ab);
  const int c = xt.channels();
  std::vector<double> mu_scaled(static_cast<std::size_t>(c)), gain(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) {
    const double s = p.s_at(k);
    if (!(s > 0)) throw OracleError("Gaussian oracle needs s > 0");
    mu_scaled[k] = sa * p.mu_at(k);
    gain[k] = s1a / (ab * s * s + 1 - ab);
  }
  LatentImage eps(xt.height(), xt.width(), c);
  const auto x = xt.values();
  auto e = eps.values();
  for (std::size_t n = 0; n < x.size(); ++n) {
    const std::size_t k = n % static_cast<std::size_t>(c);
    e[n] = static_cast<float>(gain[k] * (x[n] - mu_scaled[k]));
  }
  return eps;
}

class GaussianOracle final : public Denoiser {
 public:
  explicit GaussianOracle(GaussianOracleParams p) : params_(std::move(p)) {
    for (double s : params_.s)
      if (!(s > 0)) throw OracleError("Gaussian oracle needs s > 0");
  }

  LatentImage predict_epsilon(const DenoiseRequest& req) override {
    return gaussian_oracle_epsilon(params_, req.latents, req.alpha_bar);
  }
  const GaussianOracleParams& params() const { return params_; }
  std::string describe() const override { return "gaussian"; }

 private:
  GaussianOracleParams params_;
};

}  // namespace simstex
