#pragma once

// Property and oracle checks behind `simstex verify` and the acceptance
// test binary. Each check builds its own fixture, runs at the pinned
// tolerance and reports pass/fail together with the measured quantity.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "simstex/colorfield.hpp"
#include "simstex/denoiser.hpp"
#include "simstex/diffusion.hpp"
#include "simstex/fixtures.hpp"
#include "simstex/geometry.hpp"
#include "simstex/rasterizer.hpp"
#include "simstex/sims.hpp"

namespace simstex::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
  double budget_seconds = 0;  // 0 = no runtime bound
};

namespace detail {

inline std::string fmt(const char* f, double a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}
inline std::string fmt(const char* f, double a, double b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}
inline std::string fmt(const char* f, double a, double b, double c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

/// Run `body`, time it and fold the runtime bound into the verdict.
inline CheckResult timed(const std::string& name, double budget, const std::function<bool(std::string&)>& body) {
  CheckResult r{name, false, "", 0, budget};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    r.passed = body(r.detail);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget > 0 && r.seconds >= budget) {
    r.passed = false;
    r.detail += fmt(" [over budget: %.1fs >= %.0fs]", r.seconds, budget);
  }
  return r;
}

inline double max_abs_diff(const Grid<float>& a, const Grid<float>& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    m = std::max(m, std::abs(static_cast<double>(a.raw()[k]) - b.raw()[k]));
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 1. Single-view equivalence

/// One camera that sees every texel of a quad exactly once: SIMS must follow
/// plain DDIM on the image, step for step.
inline CheckResult single_view_equivalence() {
  return detail::timed("single-view SIMS == DDIM", 5.0, [](std::string& out) {
    constexpr int kSize = 64;
    const TriMesh mesh = fixtures::quad();
    const Camera cam = fixtures::filling_camera(kSize);
    const NoiseSchedule sched = make_schedule(ScheduleParams{});
    GaussianOracle oracle(GaussianOracleParams{{0.7}, {0.2}});
    RoundConfig cfg;
    cfg.eta = 1.0;
    cfg.tau = 0.5;
    cfg.seed = 1234;
    cfg.prompt = "a quad";

    // Plain DDIM reference on the image, drawing from the same streams.
    const RasterOutput raster = rasterize(mesh, cam, kSize, kSize);
    LatentImage x = render_texture(normal_grid(kSize, kSize, 4, run_stream(cfg.seed, Stream::init)), raster);
    std::map<int, LatentImage> reference;
    LatentImage ref_x0;
    for (int i = sched.steps(); i >= 1; --i) {
      DenoiseRequest req;
      req.latents = x;
      req.t = sched.time(i);
      req.alpha_bar = sched.alpha_bar(i);
      req.guidance = cfg.guidance;
      const LatentImage eps = oracle.guided_epsilon(req);
      if (i == 1) ref_x0 = predict_x0(x, eps, sched, i);
      NormalStream noise(run_stream(cfg.seed, Stream::ddim, i, 0));
      x = ddim_step(x, eps, sched, i, cfg.eta, cfg.tau, noise);
      reference[i] = x;
    }

    double worst = 0;
    SimsObserver obs;
    obs.on_step = [&](int i, const LatentTexture& z) {
      worst = std::max(worst, detail::max_abs_diff(z, reference.at(i)));
    };
    const RoundResult res = sims_round(mesh, {cam}, {kSize, kSize}, sched, oracle, cfg, std::nullopt, obs);
    worst = std::max(worst, detail::max_abs_diff(res.z0, ref_x0));
    out = detail::fmt("max |SIMS - DDIM| over %.0f steps = %.3g (tol 1e-6)", sched.steps(), worst);
    return worst <= 1e-6;
  });
}

// ---------------------------------------------------------------------------
// 2. Delta-oracle recovery

inline CheckResult delta_recovery() {
  return detail::timed("delta-oracle texture recovery", 60.0, [](std::string& out) {
    constexpr int kTex = 64;
    const TriMesh mesh = fixtures::test_sphere(kTex);
    const auto cams = make_cameras(CameraPreset::default9(), mesh, 0);
    const LatentTexture target = normal_grid(kTex, kTex, 4, 99);
    DeltaOracle oracle;
    std::vector<LatentImage> targets;
    std::vector<RasterOutput> rasters;
    for (std::size_t n = 0; n < cams.size(); ++n) {
      rasters.push_back(rasterize(mesh, cams[n], kTex, kTex));
      targets.push_back(render_texture(target, rasters.back()));
      oracle.register_target(static_cast<int>(n), targets.back());
    }
    RoundConfig cfg;
    cfg.eta = 0.0;
    cfg.tau = 0.0;
    cfg.seed = 7;
    const NoiseSchedule sched = make_schedule(ScheduleParams{});
    const RoundResult res = sims_round(mesh, cams, {kTex, kTex}, sched, oracle, cfg);

    double view_err = 0;
    for (std::size_t n = 0; n < cams.size(); ++n)
      for (std::size_t i = 0; i < rasters[n].pixels(); ++i) {
        if (!rasters[n].foreground(i)) continue;
        for (int c = 0; c < 4; ++c)
          view_err = std::max(view_err, std::abs(static_cast<double>(res.xhat0[n].pixel(i)[c]) -
                                                 targets[n].pixel(i)[c]));
      }
    double tex_err = 0;
    std::size_t covered = 0;
    for (std::size_t t = 0; t < res.covered.size(); ++t) {
      if (!res.covered[t]) continue;
      ++covered;
      for (int c = 0; c < 4; ++c)
        tex_err = std::max(tex_err, std::abs(static_cast<double>(res.z0.pixel(t)[c]) - target.pixel(t)[c]));
    }
    out = detail::fmt("views max err %.3g (tol 1e-2), texture max err %.3g (tol 2e-2)", view_err, tex_err) +
          ", covered texels " + std::to_string(covered);
    return covered > 0 && view_err <= 1e-2 && tex_err <= 2e-2;
  });
}

// ---------------------------------------------------------------------------
// 3. Gaussian-oracle distribution through the pipeline

inline CheckResult gaussian_distribution(int seeds = 200) {
  return detail::timed("Gaussian-oracle texel distribution", 600.0, [seeds](std::string& out) {
    const TriMesh mesh = fixtures::test_sphere();
    // Seeds are independent; each worker owns its oracle and accumulators.
    struct Acc {
      double sum = 0, sum2 = 0;
      std::size_t n = 0;
    };
    const int workers = std::max(1, std::min<int>(seeds, static_cast<int>(std::thread::hardware_concurrency())));
    std::vector<Acc> acc(static_cast<std::size_t>(workers));
    std::vector<std::future<void>> jobs;
    for (int w = 0; w < workers; ++w)
      jobs.push_back(std::async(std::launch::async, [&, w] {
        GaussianOracle oracle(GaussianOracleParams{{0.7}, {0.2}});
        Acc& a = acc[static_cast<std::size_t>(w)];
        for (int s = w; s < seeds; s += workers) {
          SimsConfig cfg;
          cfg.rounds = 1;
          cfg.seed = static_cast<std::uint64_t>(s) + 1;
          const PipelineResult res = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
          for (std::size_t t = 0; t < res.z0.pixels(); ++t) {
            if (res.covered.empty() || !res.covered[t]) continue;
            for (float v : res.z0.pixel(t)) {
              a.sum += v;
              a.sum2 += static_cast<double>(v) * v;
              ++a.n;
            }
          }
        }
      }));
    for (auto& j : jobs) j.get();
    double sum = 0, sum2 = 0;
    std::size_t n = 0;
    for (const Acc& a : acc) {
      sum += a.sum;
      sum2 += a.sum2;
      n += a.n;
    }
    if (n < 2) {
      out = "no covered texels";
      return false;
    }
    const double mean = sum / n;
    const double sd = std::sqrt(std::max(0.0, (sum2 - n * mean * mean) / (n - 1)));
    out = detail::fmt("mean %.4f (0.7 +- 0.05), std %.4f (<= 0.25)", mean, sd) + " over " + std::to_string(seeds) +
          " seeds";
    return std::abs(mean - 0.7) <= 0.05 && sd <= 0.25;
  });
}

// ---------------------------------------------------------------------------
// 4. Re-noising preserves the step marginal

inline CheckResult renoise_variance() {
  return detail::timed("renoise_visited marginal variance", 10.0, [](std::string& out) {
    const NoiseSchedule sched = make_schedule(ScheduleParams{});
    constexpr int kSide = 256;
    const LatentTexture x0 = normal_grid(kSide, kSide, 4, 11);  // unit-variance data
    const Mask visited(static_cast<std::size_t>(kSide) * kSide, 1);
    bool ok = true;
    std::string detail;
    for (int i : {50, 40, 25, 10, 1}) {
      const double ab = sched.alpha_bar(i), ab_prev = sched.alpha_bar(i - 1);
      NormalStream enc(run_stream(100, Stream::encode, i));
      const LatentTexture z_prev = stochastic_encode(x0, ab_prev, enc);
      const LatentTexture eps = normal_grid(kSide, kSide, 4, run_stream(100, Stream::renoise, i));
      const LatentTexture z = renoise_visited(z_prev, z_prev, visited, ab, ab_prev, eps);
      // Noise component around the level-i signal, and the full marginal.
      double s = 0, s2 = 0, m2 = 0;
      const double sa = std::sqrt(ab);
      for (std::size_t k = 0; k < z.size(); ++k) {
        const double r = z.raw()[k] - sa * x0.raw()[k];
        s += r;
        s2 += r * r;
        m2 += static_cast<double>(z.raw()[k]) * z.raw()[k];
      }
      const double nn = static_cast<double>(z.size());
      const double var = s2 / nn - (s / nn) * (s / nn);
      const double rel = std::abs(var / (1 - ab) - 1);
      const double marg = std::abs(m2 / nn - 1);
      ok = ok && rel <= 0.02 && marg <= 0.02;
      detail += detail::fmt("t=%.0f: var/(1-ab)-1=%+.4f marginal-1=%+.4f; ", sched.time(i), var / (1 - ab) - 1,
                            m2 / nn - 1);
    }
    out = detail + "(tol 2%)";
    return ok;
  });
}

// ---------------------------------------------------------------------------
// 5. Adjoint identity

/// Random mesh/camera/texture fixtures shared by the adjoint suite.
struct AdjointFixture {
  TriMesh mesh;
  Camera camera;
  int tex_h, tex_w;
};

inline std::vector<AdjointFixture> adjoint_fixtures(int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<AdjointFixture> out;
  for (int k = 0; k < count; ++k) {
    TriMesh mesh;
    switch (k % 3) {
      case 0: {
        // Perturbed sphere.
        TriMesh s = fixtures::uv_sphere(6 + k % 7, 4 + k % 5);
        for (auto& v : s.vertices) v = v * (0.8 + 0.4 * U(rng));
        mesh = s;
        break;
      }
      case 1: {
        // Random triangle soup.
        const int faces = 5 + static_cast<int>(U(rng) * 40);
        for (int f = 0; f < faces; ++f) {
          const Vec3 c{U(rng) - 0.5, U(rng) - 0.5, U(rng) - 0.5};
          for (int j = 0; j < 3; ++j) mesh.vertices.push_back(c + Vec3{U(rng) - 0.5, U(rng) - 0.5, U(rng) - 0.5} * 0.6);
          mesh.faces.push_back({3 * f, 3 * f + 1, 3 * f + 2});
        }
        break;
      }
      default:
        mesh = fixtures::quad(0.2 * (U(rng) - 0.5));
        mesh.face_uvs.clear();
        mesh.chart_ids.clear();
        break;
    }
    // Large enough for at least 4 texels per atlas cell.
    const int min_tex = 4 * static_cast<int>(std::ceil(std::sqrt(static_cast<double>(mesh.faces.size()))));
    const int tex = std::max(8 * (4 + static_cast<int>(U(rng) * 12)), (min_tex + 7) / 8 * 8);
    mesh = naive_atlas(normalize_mesh(mesh), tex);
    CameraPreset p;
    p.image_size = 32 + 8 * static_cast<int>(U(rng) * 5);
    const auto eye = spherical_eye(1.2 + U(rng), -80 + 160 * U(rng), 360 * U(rng));
    Camera cam = make_camera(eye, {}, fit_fov(bounding_radius(mesh), norm(eye), 1.05), p.image_size);
    out.push_back({std::move(mesh), cam, tex, tex});
  }
  return out;
}

inline CheckResult adjoint_identity(int fixtures_count = 20) {
  return detail::timed("adjoint <R z, x> = <z, R^T x>", 10.0, [fixtures_count](std::string& out) {
    double worst = 0;
    std::size_t fg = 0;
    const auto fx = adjoint_fixtures(fixtures_count, 2024);
    for (std::size_t k = 0; k < fx.size(); ++k) {
      const auto& f = fx[k];
      const RasterOutput r = rasterize(f.mesh, f.camera, f.tex_h, f.tex_w);
      fg += r.foreground_count();
      const LatentTexture z = normal_grid(f.tex_h, f.tex_w, 4, 500 + k);
      const LatentImage x = normal_grid(r.height, r.width, 4, 900 + k);
      const LatentImage rz = render_texture(z, r);
      const Scatter rt = inverse_render(x, r);
      double lhs = 0, rhs = 0;
      for (std::size_t n = 0; n < x.size(); ++n) lhs += static_cast<double>(rz.raw()[n]) * x.raw()[n];
      for (std::size_t n = 0; n < z.size(); ++n) rhs += static_cast<double>(z.raw()[n]) * rt.sum.raw()[n];
      const double scale = std::max({std::abs(lhs), std::abs(rhs), 1e-30});
      worst = std::max(worst, std::abs(lhs - rhs) / scale);
    }
    out = detail::fmt("max relative error %.3g over %.0f fixtures (tol 1e-5), foreground pixels %.0f", worst,
                      fixtures_count, static_cast<double>(fg));
    return worst <= 1e-5 && fg > 0;
  });
}

// ---------------------------------------------------------------------------
// 6. Quality-gated aggregation

/// Head-on camera (|J| = 1) and a camera orbited by 60 degrees (|J| in
/// roughly [1.6, 2.5]) over the same quad; each view writes a distinct
/// constant. The head-on value must own every shared texel regardless of
/// aggregation order.
inline CheckResult quality_aggregation() {
  return detail::timed("quality aggregation: head-on view wins", 5.0, [](std::string& out) {
    constexpr int kTex = 32;
    constexpr double kDist = 4.0;
    const TriMesh mesh = fixtures::quad();
    const RasterOutput head = rasterize(mesh, fixtures::filling_camera(kTex, kDist), kTex, kTex);
    const RasterOutput oblique = rasterize(mesh, fixtures::orbit_camera(kTex, kDist, 60.0), kTex, kTex);

    bool ok = true;
    std::size_t shared_total = 0;
    for (bool head_first : {false, true}) {
      LatentTexture z(kTex, kTex, 4, 0.0f);
      Mask mask(z.pixels(), 0);
      QualityBuffer quality(z.pixels(), -std::numeric_limits<float>::infinity());
      const auto write = [&](const RasterOutput& r, float value) {
        const Scatter s = inverse_render(LatentImage(r.height, r.width, 4, value), r);
        aggregate_view(z, s.sum, s.count, view_quality(r), mask, quality);
        return s.count;
      };
      ScalarGrid c_head, c_obl;
      if (head_first) {
        c_head = write(head, 1.0f);
        c_obl = write(oblique, 2.0f);
      } else {
        c_obl = write(oblique, 2.0f);
        c_head = write(head, 1.0f);
      }
      for (std::size_t t = 0; t < z.pixels(); ++t) {
        if (c_head.raw()[t] > 0 && c_obl.raw()[t] > 0) {
          ++shared_total;
          for (float v : z.pixel(t)) ok = ok && v == 1.0f;
        }
      }
    }
    float jmin = 1e9f, jmax = 0;
    for (std::size_t i = 0; i < oblique.pixels(); ++i)
      if (oblique.foreground(i)) {
        jmin = std::min(jmin, oblique.jac[i]);
        jmax = std::max(jmax, oblique.jac[i]);
      }
    out = detail::fmt("shared texels checked %.0f, oblique |J| in [%.3f, %.3f], head-on |J| = 1", shared_total, jmin,
                      jmax);
    return ok && shared_total > 0;
  });
}

// ---------------------------------------------------------------------------
// 7. Color field: gradient check and checkerboard self-fit

struct GradCheckReport {
  double max_rel_tables = 0, max_rel_weights = 0, max_rel_biases = 0;
  std::size_t checked = 0;
};

/// Analytic vs central differences (step h) for every MLP parameter and every
/// table entry touched by the samples, in double precision.
inline GradCheckReport gradient_check(double h = 1e-3, std::uint64_t seed = 5) {
  HashGridConfig hc;
  hc.log2_table = 12;
  HashGridField<double> field(hc);
  field.initialize(seed, 0.5);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-0.5, 0.5);
  // Central differences are meaningless across a ReLU kink, so sample points
  // whose hidden pre-activations lie within `kink_margin` of zero are redrawn.
  constexpr double kink_margin = 0.02;
  const auto near_kink = [&](const Vec3& xyz) {
    const auto act = field.forward_cached(xyz);
    for (double a : act.a1)
      if (std::abs(a) < kink_margin) return true;
    for (double a : act.a2)
      if (std::abs(a) < kink_margin) return true;
    return false;
  };
  std::vector<DistillSample> samples(10);
  for (auto& s : samples) {
    int tries = 0;
    do s.xyz = {U(rng), U(rng), U(rng)};
    while (near_kink(s.xyz) && ++tries < 10000);
    s.rgb = {static_cast<float>(U(rng) + 0.5), static_cast<float>(U(rng) + 0.5), static_cast<float>(U(rng) + 0.5)};
  }
  std::vector<double> grad;
  loss_and_grad<double>(field, samples, grad);

  const auto& L = field.layout();
  std::vector<std::size_t> idx;
  for (std::size_t k = L.w1; k < L.total; ++k) idx.push_back(k);
  std::vector<char> touched(L.w1, 0);
  for (const auto& s : samples) {
    const auto c = field.corners(s.xyz);
    for (int l = 0; l < hc.levels; ++l)
      for (int k = 0; k < 8; ++k)
        for (int f = 0; f < hc.features; ++f)
          touched[(static_cast<std::size_t>(l) * field.table_size() + c.index[static_cast<std::size_t>(l) * 8 + k]) *
                      hc.features +
                  f] = 1;
  }
  for (std::size_t k = 0; k < L.w1; ++k)
    if (touched[k]) idx.push_back(k);

  GradCheckReport rep;
  const auto is_bias = [&](std::size_t k) {
    return (k >= L.b1 && k < L.w2) || (k >= L.b2 && k < L.w3) || (k >= L.b3);
  };
  for (std::size_t k : idx) {
    auto& p = field.params()[k];
    const double saved = p;
    p = saved + h;
    const double up = batch_loss<double>(field, samples);
    p = saved - h;
    const double dn = batch_loss<double>(field, samples);
    p = saved;
    const double numeric = (up - dn) / (2 * h);
    const double rel = std::abs(numeric - grad[k]) / std::max({std::abs(numeric), std::abs(grad[k]), 1e-8});
    double& slot = k < L.w1 ? rep.max_rel_tables : (is_bias(k) ? rep.max_rel_biases : rep.max_rel_weights);
    slot = std::max(slot, rel);
    ++rep.checked;
  }
  return rep;
}

/// 64^2 checkerboard (8-texel squares, values 0 and 1) on the z = 0 quad,
/// sampled at texel centers.
inline std::vector<DistillSample> checkerboard_samples(int side = 64, int square = 8) {
  std::vector<DistillSample> s;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const float v = ((r / square + c / square) % 2) ? 1.0f : 0.0f;
      s.push_back({{(c + 0.5) / side - 0.5, 0.5 - (r + 0.5) / side, 0.0}, {v, v, v}, 0});
    }
  return s;
}

inline double psnr(double mse) { return 10.0 * std::log10(1.0 / mse); }

inline CheckResult colorfield_check() {
  return detail::timed("color field gradients and self-fit", 120.0, [](std::string& out) {
    const GradCheckReport g = gradient_check();
    const auto samples = checkerboard_samples();
    ColorField field;
    field.initialize(17);
    DistillConfig dc;
    dc.iters = 500;
    dc.lr = 0.01;
    dc.batch = samples.size();
    distill<float>(samples, field, dc);
    const double mse = batch_loss<float>(field, samples);
    const double p = psnr(mse);
    out = detail::fmt("grad rel err tables %.2g weights %.2g biases %.2g (tol 1e-3); ", g.max_rel_tables,
                      g.max_rel_weights, g.max_rel_biases) +
          detail::fmt("checkerboard PSNR %.2f dB after 500 iters (> 30)", p);
    return g.checked > 0 && g.max_rel_tables < 1e-3 && g.max_rel_weights < 1e-3 && g.max_rel_biases < 1e-3 &&
           p > 30.0;
  });
}

// ---------------------------------------------------------------------------
// 8. Refinement resolution policy

inline CheckResult refinement_policy() {
  return detail::timed("refinement resolution 64 -> 144", 0.0, [](std::string& out) {
    const auto [h, w] = texture_resolution({64, 64}, Refine{deg2rad(60.0), deg2rad(30.0)});
    out = "refine(60deg -> 30deg) of 64 gives " + std::to_string(h) + "x" + std::to_string(w) + " (expect 144)";
    return h == 144 && w == 144;
  });
}

// ---------------------------------------------------------------------------
// 9. End-to-end runtime

inline CheckResult end_to_end_runtime() {
  return detail::timed("two-round pipeline runtime", 60.0, [](std::string& out) {
    const TriMesh mesh = fixtures::test_sphere();
    GaussianOracle oracle(GaussianOracleParams{{0.7}, {0.2}});
    SimsConfig cfg;
    cfg.rounds = 2;
    cfg.seed = 3;
    const PipelineResult res = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
    const bool finite = all_finite(res.z0.values());
    out = detail::fmt("2 rounds, %.0f final cameras, texture %.0f^2, %.2fs", static_cast<double>(res.cameras.size()),
                      res.tex_dims.first, res.manifest["seconds"].get<double>());
    return finite && res.cameras.size() == 9 && res.xhat0.size() == 9 && res.xhat0.front().height() == 64;
  });
}

// ---------------------------------------------------------------------------

/// Deterministic DDIM from N(0, I) with the exact Gaussian eps must follow
/// the affine probability-flow map of the noised data marginal.
inline CheckResult gaussian_ddim_sanity(int runs = 1000) {
  return detail::timed("Gaussian-oracle DDIM transport", 0.0, [runs](std::string& out) {
    const NoiseSchedule sched = make_schedule(ScheduleParams{});
    const double mu = 0.7, s = 0.2;
    GaussianOracle oracle(GaussianOracleParams{{mu}, {s}});
    double sum = 0, sum2 = 0;
    std::size_t n = 0;
    NormalStream unused(0);
    for (int r = 0; r < runs; ++r) {
      LatentImage x = normal_grid(8, 8, 4, stream_seed(77, r));
      for (int i = sched.steps(); i >= 1; --i) {
        DenoiseRequest req;
        req.latents = x;
        req.t = sched.time(i);
        req.alpha_bar = sched.alpha_bar(i);
        x = ddim_step(x, oracle.guided_epsilon(req), sched, i, 0.0, 0.0, unused);
      }
      for (float v : x.values()) {
        sum += v;
        sum2 += static_cast<double>(v) * v;
        ++n;
      }
    }
    // The flow for Gaussian data is affine, (x - m_t) / sd_t is conserved, so
    // starting from N(0, 1) rather than the true N(m_T, sd_T^2) shifts and
    // scales the endpoint accordingly.
    const auto m = [&](double ab) { return std::sqrt(ab) * mu; };
    const auto sdv = [&](double ab) { return std::sqrt(ab * s * s + 1 - ab); };
    const double a0 = sched.alpha_bar(0), aT = sched.alpha_bar(sched.steps());
    const double want_sd = sdv(a0) / sdv(aT), want_mean = m(a0) - m(aT) * want_sd;
    const double mean = sum / n;
    const double sd = std::sqrt((sum2 - n * mean * mean) / (n - 1));
    out = detail::fmt("mean %.4f (want %.4f), std %.4f", mean, want_mean, sd) +
          detail::fmt(" (want %.4f)", want_sd);
    return std::abs(mean - want_mean) <= 0.02 && std::abs(sd / want_sd - 1) <= 0.03;
  });
}

using Suite = std::vector<std::function<CheckResult()>>;

/// Named suites for `simstex verify`.
inline std::map<std::string, Suite> suites() {
  return {
      {"adjoint", {[] { return adjoint_identity(); }}},
      {"schedule", {[] { return renoise_variance(); }, [] { return refinement_policy(); }}},
      {"oracle", {[] { return gaussian_ddim_sanity(); }, [] { return gaussian_distribution(); }}},
      {"sims",
       {[] { return single_view_equivalence(); }, [] { return delta_recovery(); },
        [] { return quality_aggregation(); }, [] { return end_to_end_runtime(); }}},
      {"colorfield", {[] { return colorfield_check(); }}},
  };
}

inline void print_result(std::FILE* f, const CheckResult& r) {
  std::fprintf(f, "[%s] %-42s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
}

}  // namespace simstex::verify
