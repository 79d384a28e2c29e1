#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simstex/core.hpp"
#include "simstex/denoiser.hpp"
#include "simstex/diffusion.hpp"
#include "simstex/geometry.hpp"
#include "simstex/rasterizer.hpp"

namespace simstex {

/// Purposes of the seeded noise streams of one sampling run.
enum class Stream : std::uint64_t { init = 1, renoise, background, ddim, jitter, encode, round };

inline std::uint64_t run_stream(std::uint64_t seed, Stream s) { return stream_seed(seed, static_cast<std::uint64_t>(s)); }
inline std::uint64_t run_stream(std::uint64_t seed, Stream s, int step) {
  return stream_seed(seed, static_cast<std::uint64_t>(s), step);
}
inline std::uint64_t run_stream(std::uint64_t seed, Stream s, int step, int view) {
  return stream_seed(seed, static_cast<std::uint64_t>(s), step, view);
}

using Mask = std::vector<std::uint8_t>;
using QualityBuffer = std::vector<float>;

/// Bring visited texels from level i-1 back to level i with the shared
/// texture-space draw; unvisited texels take the step-start texture z_i.
///   visited:   sqrt(ab_i / ab_prev) * z_prev + sqrt(1 - ab_i / ab_prev) * eps
///   unvisited: z_i
inline LatentTexture renoise_visited(const LatentTexture& z_prev, const LatentTexture& z_i, const Mask& mask,
                                     double ab_i, double ab_prev, const LatentTexture& eps_shared) {
  require_same_shape(z_prev, z_i, "renoise_visited");
  require_same_shape(z_prev, eps_shared, "renoise_visited");
  if (mask.size() != z_prev.pixels()) throw ShapeError("renoise_visited: mask size mismatch");
  const double ratio = ab_i / ab_prev;
  const double keep = std::sqrt(ratio), add = std::sqrt(std::max(0.0, 1 - ratio));
  LatentTexture out = z_i;
  const int c = z_prev.channels();
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (!mask[t]) continue;
    const auto zp = z_prev.pixel(t);
    const auto e = eps_shared.pixel(t);
    auto o = out.pixel(t);
    for (int k = 0; k < c; ++k) o[k] = static_cast<float>(keep * zp[k] + add * e[k]);
  }
  return out;
}

/// Per-texel view quality: mean of -|J| over the pixels that landed on the
/// texel, -inf where no pixel did.
inline QualityBuffer view_quality(const RasterOutput& raster) {
  const std::size_t n = static_cast<std::size_t>(raster.tex_h) * raster.tex_w;
  std::vector<double> sum(n, 0.0);
  std::vector<int> count(n, 0);
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    const int t = raster.texel_index[i];
    if (t == kBackground) continue;
    sum[static_cast<std::size_t>(t)] -= raster.jac[i];
    ++count[static_cast<std::size_t>(t)];
  }
  QualityBuffer q(n, -std::numeric_limits<float>::infinity());
  for (std::size_t t = 0; t < n; ++t)
    if (count[t] > 0) q[t] = static_cast<float>(sum[t] / count[t]);
  return q;
}

/// Quality-gated write of one inverse-rendered view into the running texture.
/// Returns the update set U (count > 0 and q_view > quality) so that callers
/// can apply the same selection to a companion texture.
inline Mask aggregate_view(LatentTexture& z_run, const LatentTexture& sum, const ScalarGrid& count,
                           const QualityBuffer& q_view, Mask& mask, QualityBuffer& quality) {
  require_same_shape(z_run, sum, "aggregate_view");
  const std::size_t n = z_run.pixels();
  if (count.size() != n || q_view.size() != n || mask.size() != n || quality.size() != n)
    throw ShapeError("aggregate_view: buffer size mismatch");
  Mask update(n, 0);
  const int c = z_run.channels();
  for (std::size_t t = 0; t < n; ++t) {
    const float cnt = count.raw()[t];
    if (cnt > 0 && q_view[t] > quality[t]) {
      update[t] = 1;
      const auto s = sum.pixel(t);
      auto z = z_run.pixel(t);
      for (int k = 0; k < c; ++k) z[k] = s[k] / cnt;
    }
    if (cnt > 0) mask[t] = 1;
    quality[t] = std::max(quality[t], q_view[t]);
  }
  return update;
}

/// Write sum/count into `z` wherever `update` is set.
inline void apply_update(LatentTexture& z, const LatentTexture& sum, const ScalarGrid& count, const Mask& update) {
  const int c = z.channels();
  for (std::size_t t = 0; t < update.size(); ++t) {
    if (!update[t]) continue;
    const float cnt = count.raw()[t];
    const auto s = sum.pixel(t);
    auto o = z.pixel(t);
    for (int k = 0; k < c; ++k) o[k] = s[k] / cnt;
  }
}

/// Nearest-neighbor resize of a texture.
inline LatentTexture upsample_nearest(const LatentTexture& z, int h, int w) {
  LatentTexture out(h, w, z.channels());
  for (int r = 0; r < h; ++r) {
    const int sr = static_cast<int>(static_cast<long long>(r) * z.height() / h);
    for (int c = 0; c < w; ++c) {
      const int sc = static_cast<int>(static_cast<long long>(c) * z.width() / w);
      const auto src = z.pixel(static_cast<std::size_t>(sr) * z.width() + sc);
      std::copy(src.begin(), src.end(), out.pixel(static_cast<std::size_t>(r) * w + c).begin());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// One SIMS round

struct RoundConfig {
  double eta = 1.0;
  double tau = 0.5;
  std::uint64_t seed = 0;
  GuidanceConfig guidance;
  std::string prompt;
  int channels = 4;
  /// When set, cameras are regenerated from this preset at every step with a
  /// step-dependent seed; otherwise the fixed camera list is used.
  std::optional<CameraPreset> jitter;
};

/// Everything visible after one view has been aggregated. Used by tests and
/// diagnostics; the sampler does not depend on observers.
struct ViewEvent {
  int step;  // ladder index i (S..1)
  int view;
  const RasterOutput& raster;
  const LatentImage& x_in;    // rendered, background-filled input
  const LatentImage& eps;     // guided epsilon
  const LatentImage& x_prev;  // DDIM output
  const LatentTexture& z_in;  // texture rendered for this view
  const LatentTexture& z_run;
  const Mask& mask;
  const QualityBuffer& quality;
};

struct SimsObserver {
  std::function<void(const ViewEvent&)> on_view;
  std::function<void(int step, const LatentTexture& z)> on_step;  // z after step `step`
};

struct CoverageStats {
  std::size_t covered = 0;
  std::size_t chart_texels = 0;
  std::size_t total = 0;
  double fraction() const { return total ? static_cast<double>(covered) / total : 0.0; }
  double chart_fraction() const { return chart_texels ? static_cast<double>(covered) / chart_texels : 0.0; }
};

struct RoundResult {
  LatentTexture z0;                 // aggregated x0 predictions of the final step
  LatentTexture z_final;            // aggregated DDIM output of the final step (level t_min)
  std::vector<LatentImage> xhat0;   // per-view x0 predictions of the final step
  std::vector<Camera> final_cameras;
  Mask covered;                     // visited mask of the final step
  CoverageStats coverage;
  double seconds = 0;
};

inline std::size_t count_chart_texels(const TriMesh& mesh, int h, int w) {
  Mask inside(static_cast<std::size_t>(h) * w, 0);
  for_each_uv_texel(mesh, h, w, [&](int, int r, int c, const auto&) { inside[static_cast<std::size_t>(r) * w + c] = 1; });
  return static_cast<std::size_t>(std::count(inside.begin(), inside.end(), 1));
}

/// Sequential interlaced multiview sampling over the full schedule ladder.
/// `z_init`, when given, replaces the N(0, I) start at time(S).
inline RoundResult sims_round(const TriMesh& mesh, const std::vector<Camera>& cameras, std::pair<int, int> tex_dims,
                              const NoiseSchedule& sched, Denoiser& denoiser, const RoundConfig& cfg,
                              const std::optional<LatentTexture>& z_init = std::nullopt,
                              const SimsObserver& observer = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto [tex_h, tex_w] = tex_dims;
  if (cameras.empty() && !cfg.jitter) throw ShapeError("sims_round needs at least one camera");
  if (tex_h % 8 != 0 || tex_w % 8 != 0 || tex_h < 8 || tex_w < 8)
    throw ShapeError("texture dimensions must be multiples of 8");
  if (!mesh.has_uvs()) throw InvalidMesh("sims_round needs a UV'd mesh");

  LatentTexture z = z_init ? *z_init : normal_grid(tex_h, tex_w, cfg.channels, run_stream(cfg.seed, Stream::init));
  if (z.height() != tex_h || z.width() != tex_w) throw ShapeError("z_init does not match texture dimensions");
  const int channels = z.channels();
  const std::size_t texels = z.pixels();

  // Fixed cameras are rasterized once per round.
  const auto build_rasters = [&](const std::vector<Camera>& cams) {
    std::vector<RasterOutput> rs;
    rs.reserve(cams.size());
    for (const auto& cam : cams) rs.push_back(rasterize(mesh, cam, tex_h, tex_w));
    return rs;
  };
  std::vector<Camera> cams = cameras;
  std::vector<RasterOutput> rasters;
  std::vector<QualityBuffer> qualities;
  std::vector<ScalarGrid> depths;
  const auto prepare = [&] {
    rasters = build_rasters(cams);
    qualities.clear();
    depths.clear();
    for (const auto& r : rasters) {
      qualities.push_back(view_quality(r));
      depths.push_back(normalized_depth(r));
    }
  };
  if (!cfg.jitter) prepare();

  RoundResult result;
  const int S = sched.steps();
  for (int i = S; i >= 1; --i) {
    if (cfg.jitter) {
      cams = make_cameras(*cfg.jitter, mesh, run_stream(cfg.seed, Stream::jitter, i));
      prepare();
    }
    const double ab = sched.alpha_bar(i), ab_prev = sched.alpha_bar(i - 1);
    const DdimCoefficients coeff{ab, ab_prev, ddim_sigma(ab, ab_prev, cfg.eta)};
    const bool last = i == 1;

    const LatentTexture z_step = z;
    LatentTexture z_run = z;
    LatentTexture z_hat = z;
    Mask mask(texels, 0);
    QualityBuffer quality(texels, -std::numeric_limits<float>::infinity());
    const LatentTexture eps_shared = normal_grid(tex_h, tex_w, channels, run_stream(cfg.seed, Stream::renoise, i));
    if (last) result.xhat0.clear();

    for (std::size_t n = 0; n < cams.size(); ++n) {
      const int view = static_cast<int>(n);
      const LatentTexture z_in = renoise_visited(z_run, z_step, mask, ab, ab_prev, eps_shared);
      NormalStream bg(run_stream(cfg.seed, Stream::background, i, view));
      const LatentImage x_in = fill_background(render_texture(z_in, rasters[n]), rasters[n], bg);

      DenoiseRequest req;
      req.latents = x_in;
      req.t = sched.time(i);
      req.alpha_bar = ab;
      req.depth = depths[n];
      req.prompt = cfg.prompt;
      req.view_suffix = prompt_view_suffix(cams[n]);
      req.guidance = cfg.guidance;
      req.camera_id = view;
      req.camera = cams[n];
      const LatentImage eps = denoiser.guided_epsilon(req);
      require_same_shape(eps, x_in, "denoiser output");

      NormalStream ddim_noise(run_stream(cfg.seed, Stream::ddim, i, view));
      const LatentImage x_prev = ddim_step(x_in, eps, coeff, cfg.tau, ddim_noise);

      const Scatter scatter = inverse_render(x_prev, rasters[n]);
      const Mask update = aggregate_view(z_run, scatter.sum, scatter.count, qualities[n], mask, quality);
      if (last) {
        LatentImage x0 = predict_x0(x_in, eps, ab);
        const Scatter s0 = inverse_render(x0, rasters[n]);
        apply_update(z_hat, s0.sum, s0.count, update);
        result.xhat0.push_back(std::move(x0));
      }
      if (observer.on_view)
        observer.on_view(ViewEvent{i, view, rasters[n], x_in, eps, x_prev, z_in, z_run, mask, quality});
    }
    z = std::move(z_run);
    if (last) {
      result.z0 = std::move(z_hat);
      result.covered = mask;
    }
    if (observer.on_step) observer.on_step(i, z);
  }
  if (!all_finite(z.values())) throw NumericalError("non-finite values in the latent texture");
  result.z_final = std::move(z);
  result.final_cameras = cams;
  result.coverage.total = texels;
  result.coverage.covered = static_cast<std::size_t>(std::count(result.covered.begin(), result.covered.end(), 1));
  result.coverage.chart_texels = count_chart_texels(mesh, tex_h, tex_w);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Two-round pipeline

struct SimsConfig {
  double eta = 1.0;
  double tau_coarse = 0.5;
  double tau_refine = 0.0;
  int refine_t = 500;
  GuidanceConfig guidance;
  std::uint64_t seed = 0;
  int rounds = 2;
  int base_resolution = 64;  // coarse texture base side, texels
  double refine_zoom = 1.5;  // tan(old_fov/2) / tan(new_fov/2) for round-2 cameras
  CameraPreset coarse_preset = CameraPreset::jittered18();
  CameraPreset refine_preset = CameraPreset::default9();
  int channels = 4;
};

inline void to_json(nlohmann::json& j, const SimsConfig& c) {
  j = {{"eta", c.eta},
       {"tau_coarse", c.tau_coarse},
       {"tau_refine", c.tau_refine},
       {"refine_t", c.refine_t},
       {"guidance", c.guidance},
       {"seed", c.seed},
       {"rounds", c.rounds},
       {"base_resolution", c.base_resolution},
       {"refine_zoom", c.refine_zoom},
       {"coarse_preset", c.coarse_preset},
       {"refine_preset", c.refine_preset},
       {"channels", c.channels}};
}

inline void from_json(const nlohmann::json& j, SimsConfig& c) {
  c = SimsConfig{};
  const auto opt = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  opt("eta", c.eta);
  opt("tau_coarse", c.tau_coarse);
  opt("tau_refine", c.tau_refine);
  opt("refine_t", c.refine_t);
  opt("guidance", c.guidance);
  opt("seed", c.seed);
  opt("rounds", c.rounds);
  opt("base_resolution", c.base_resolution);
  opt("refine_zoom", c.refine_zoom);
  opt("coarse_preset", c.coarse_preset);
  opt("refine_preset", c.refine_preset);
  opt("channels", c.channels);
}

/// Schedule of the refinement round: same step density as the coarse ladder,
/// starting at refine_t.
inline ScheduleParams refine_schedule(const ScheduleParams& p, int refine_t) {
  if (!(refine_t > p.t_min && refine_t < p.t_max)) throw ScheduleError("refine_t must lie inside (t_min, t_max)");
  ScheduleParams r = p;
  r.t_max = refine_t;
  const double density = static_cast<double>(p.S) / (p.t_max - p.t_min);
  r.S = std::clamp(static_cast<int>(std::lround(density * (refine_t - p.t_min))), 1, refine_t - p.t_min);
  return r;
}

inline std::vector<Camera> narrow_cameras(std::vector<Camera> cams, double zoom) {
  for (auto& c : cams) c.fov_y = 2.0 * std::atan(std::tan(c.fov_y / 2) / zoom);
  return cams;
}

struct PipelineResult {
  LatentTexture z0;
  Mask covered;  // texels written at the last step of the final round
  std::vector<LatentImage> xhat0;
  std::vector<Camera> cameras;  // cameras of the final round, in view order
  std::pair<int, int> tex_dims;
  std::optional<LatentTexture> round2_init;     // encoded start texture of round 2
  std::optional<LatentTexture> round1_upsampled;  // round-1 z0 at round-2 resolution
  nlohmann::json manifest;
};

/// Coarse round with jittered wide cameras, then (rounds == 2) a refinement
/// round with narrower fixed cameras starting from the re-encoded coarse
/// texture.
inline PipelineResult texfusion_pipeline(const TriMesh& mesh, const std::string& prompt,
                                         const ScheduleParams& sched_params, Denoiser& denoiser,
                                         const SimsConfig& cfg) {
  if (cfg.rounds != 1 && cfg.rounds != 2) throw ScheduleError("rounds must be 1 or 2");
  if (!mesh.has_uvs()) throw InvalidMesh("texfusion_pipeline needs a UV'd mesh");
  const auto t0 = std::chrono::steady_clock::now();
  const NoiseSchedule sched = make_schedule(sched_params);
  const auto coarse_dims = texture_resolution(mesh, Coarse{}, cfg.base_resolution);

  RoundConfig r1;
  r1.eta = cfg.eta;
  r1.tau = cfg.tau_coarse;
  r1.seed = cfg.seed;
  r1.guidance = cfg.guidance;
  r1.prompt = prompt;
  r1.channels = cfg.channels;
  std::vector<Camera> coarse_cams = make_cameras(cfg.coarse_preset, mesh, cfg.seed);
  if (cfg.coarse_preset.kind == PresetKind::jittered18) r1.jitter = cfg.coarse_preset;
  RoundResult round1 = sims_round(mesh, coarse_cams, coarse_dims, sched, denoiser, r1);

  nlohmann::json manifest;
  manifest["prompt"] = prompt;
  manifest["denoiser"] = denoiser.describe();
  manifest["schedule"] = sched_params;
  manifest["sims"] = cfg;
  manifest["refine_t"] = cfg.refine_t;
  manifest["rounds"] = nlohmann::json::array();
  const auto round_json = [](int index, std::uint64_t seed, const RoundResult& r, std::pair<int, int> dims,
                             const ScheduleParams& sp, double tau) {
    return nlohmann::json{{"round", index},
                          {"seed", seed},
                          {"tau", tau},
                          {"schedule", sp},
                          {"texture", {dims.first, dims.second}},
                          {"cameras", r.final_cameras},
                          {"coverage",
                           {{"covered_texels", r.coverage.covered},
                            {"chart_texels", r.coverage.chart_texels},
                            {"total_texels", r.coverage.total},
                            {"fraction", r.coverage.fraction()},
                            {"chart_fraction", r.coverage.chart_fraction()}}},
                          {"seconds", r.seconds}};
  };
  manifest["rounds"].push_back(round_json(1, r1.seed, round1, coarse_dims, sched_params, r1.tau));

  PipelineResult out;
  if (cfg.rounds == 1) {
    out.z0 = std::move(round1.z0);
    out.covered = std::move(round1.covered);
    out.xhat0 = std::move(round1.xhat0);
    out.cameras = std::move(round1.final_cameras);
    out.tex_dims = coarse_dims;
  } else {
    const double old_fov = coarse_cams.front().fov_y;
    std::vector<Camera> fine_cams = narrow_cameras(make_cameras(cfg.refine_preset, mesh, cfg.seed), cfg.refine_zoom);
    const auto fine_dims = texture_resolution(coarse_dims, Refine{old_fov, fine_cams.front().fov_y});
    LatentTexture up = upsample_nearest(round1.z0, fine_dims.first, fine_dims.second);
    NormalStream enc(run_stream(cfg.seed, Stream::encode));
    LatentTexture z_init = stochastic_encode(up, sched.alpha_bar_at(cfg.refine_t), enc);

    const ScheduleParams fine_params = refine_schedule(sched_params, cfg.refine_t);
    const NoiseSchedule fine_sched = make_schedule(fine_params);
    RoundConfig r2 = r1;
    r2.jitter.reset();
    r2.tau = cfg.tau_refine;
    r2.seed = run_stream(cfg.seed, Stream::round, 2);
    RoundResult round2 = sims_round(mesh, fine_cams, fine_dims, fine_sched, denoiser, r2, z_init);
    manifest["rounds"].push_back(round_json(2, r2.seed, round2, fine_dims, fine_params, r2.tau));

    out.z0 = std::move(round2.z0);
    out.covered = std::move(round2.covered);
    out.xhat0 = std::move(round2.xhat0);
    out.cameras = std::move(round2.final_cameras);
    out.tex_dims = fine_dims;
    out.round2_init = std::move(z_init);
    out.round1_upsampled = std::move(up);
  }
  manifest["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.manifest = std::move(manifest);
  return out;
}

}  // namespace simstex
