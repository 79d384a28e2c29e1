#include <gtest/gtest.h>

#include <cmath>

#include "simstex/fixtures.hpp"
#include "simstex/sims.hpp"
#include "simstex/verify.hpp"

using namespace simstex;

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// Forwards to a wrapped denoiser and records the noise level of each query.
class Recorder final : public Denoiser {
 public:
  explicit Recorder(Denoiser& inner) : inner_(inner) {}
  LatentImage predict_epsilon(const DenoiseRequest& r) override { return inner_.predict_epsilon(r); }
  LatentImage guided_epsilon(const DenoiseRequest& r) override {
    calls.push_back({r.t, r.alpha_bar, r.camera_id});
    return inner_.guided_epsilon(r);
  }
  std::string describe() const override { return "recorder"; }

  struct Call {
    int t;
    double alpha_bar;
    int view;
  };
  std::vector<Call> calls;

 private:
  Denoiser& inner_;
};

double variance(const std::vector<double>& v) {
  double s = 0, s2 = 0;
  for (double x : v) {
    s += x;
    s2 += x * x;
  }
  const double n = double(v.size()), m = s / n;
  return s2 / n - m * m;
}

}  // namespace

TEST(Renoise, EmptyMaskReturnsStepStart) {
  const LatentTexture zp = normal_grid(8, 8, 4, 1), zi = normal_grid(8, 8, 4, 2), e = normal_grid(8, 8, 4, 3);
  EXPECT_EQ(renoise_visited(zp, zi, Mask(64, 0), 0.3, 0.5, e), zi);
}

TEST(Renoise, EqualLevelsReturnPrevious) {
  const LatentTexture zp = normal_grid(8, 8, 4, 1), zi = normal_grid(8, 8, 4, 2), e = normal_grid(8, 8, 4, 3);
  EXPECT_EQ(renoise_visited(zp, zi, Mask(64, 1), 0.4, 0.4, e), zp);
}

TEST(Renoise, ZeroInputGivesAddedVariance) {
  const int n = 256;
  const LatentTexture zero(n, n, 1, 0.0f), e = normal_grid(n, n, 1, 4);
  const LatentTexture out = renoise_visited(zero, zero, Mask(std::size_t(n) * n, 1), 0.25, 1.0, e);
  std::vector<double> v(out.values().begin(), out.values().end());
  EXPECT_NEAR(variance(v), 0.75, 0.75 * 0.03);
}

TEST(Renoise, MixedMaskAndShapeErrors) {
  const LatentTexture zp(2, 2, 1, 1.0f), zi(2, 2, 1, 5.0f), e(2, 2, 1, 2.0f);
  const LatentTexture out = renoise_visited(zp, zi, Mask{1, 0, 0, 1}, 0.25, 1.0, e);
  const float visited = static_cast<float>(0.5 * 1 + std::sqrt(0.75) * 2);
  EXPECT_FLOAT_EQ(out.raw()[0], visited);
  EXPECT_EQ(out.raw()[1], 5.0f);
  EXPECT_EQ(out.raw()[2], 5.0f);
  EXPECT_FLOAT_EQ(out.raw()[3], visited);
  EXPECT_THROW(renoise_visited(zp, zi, Mask(3, 0), 0.25, 1.0, e), ShapeError);
  EXPECT_THROW(renoise_visited(zp, LatentTexture(2, 2, 2), Mask(4, 0), 0.25, 1.0, e), ShapeError);
}

TEST(Aggregate, ZeroCountLeavesTextureUnchanged) {
  LatentTexture z(2, 2, 1, 9.0f);
  Mask mask(4, 0);
  QualityBuffer quality(4, kNegInf);
  const Mask u = aggregate_view(z, LatentTexture(2, 2, 1, 3.0f), ScalarGrid(2, 2, 1, 0.0f), QualityBuffer(4, -1.0f),
                                mask, quality);
  for (float v : z.values()) EXPECT_EQ(v, 9.0f);
  for (auto m : mask) EXPECT_EQ(m, 0);
  for (auto x : u) EXPECT_EQ(x, 0);
}

TEST(Aggregate, AveragesSumOverCount) {
  LatentTexture z(1, 1, 2, 0.0f);
  Mask mask(1, 0);
  QualityBuffer quality(1, kNegInf);
  aggregate_view(z, LatentTexture(1, 1, 2, 8.0f), ScalarGrid(1, 1, 1, 4.0f), QualityBuffer{-1.5f}, mask, quality);
  EXPECT_EQ(z.raw()[0], 2.0f);
  EXPECT_EQ(z.raw()[1], 2.0f);
  EXPECT_EQ(mask[0], 1);
  EXPECT_EQ(quality[0], -1.5f);
}

TEST(Aggregate, BetterViewOverwritesWorseDoesNot) {
  LatentTexture z(1, 1, 1, 0.0f);
  Mask mask(1, 0);
  QualityBuffer quality(1, kNegInf);
  const ScalarGrid one(1, 1, 1, 1.0f);
  // oblique first (q = -2), then head-on (q = -1): head-on wins
  aggregate_view(z, LatentTexture(1, 1, 1, 5.0f), one, QualityBuffer{-2.0f}, mask, quality);
  Mask u = aggregate_view(z, LatentTexture(1, 1, 1, 7.0f), one, QualityBuffer{-1.0f}, mask, quality);
  EXPECT_EQ(z.raw()[0], 7.0f);
  EXPECT_EQ(u[0], 1);
  // a worse or equally good later view is ignored
  u = aggregate_view(z, LatentTexture(1, 1, 1, 3.0f), one, QualityBuffer{-1.0f}, mask, quality);
  EXPECT_EQ(z.raw()[0], 7.0f);
  EXPECT_EQ(u[0], 0);
  EXPECT_EQ(quality[0], -1.0f);
}

TEST(Aggregate, Criterion) {
  const verify::CheckResult r = verify::quality_aggregation();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(ViewQuality, HeadOnQuadIsMinusOne) {
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::filling_camera(16), 16, 16);
  for (float q : view_quality(r)) EXPECT_NEAR(q, -1.0f, 1e-4f);
  Camera away = fixtures::filling_camera(16);
  away.target = {0, 0, 5};
  for (float q : view_quality(rasterize(fixtures::quad(), away, 16, 16))) EXPECT_EQ(q, kNegInf);
}

TEST(UpsampleNearest, ReplicatesBlocks) {
  LatentTexture z(2, 2, 1);
  for (int k = 0; k < 4; ++k) z.raw()[k] = float(k);
  const LatentTexture u = upsample_nearest(z, 4, 6);
  EXPECT_EQ(u.at(0, 0, 0), 0.0f);
  EXPECT_EQ(u.at(1, 2, 0), 0.0f);
  EXPECT_EQ(u.at(0, 3, 0), 1.0f);
  EXPECT_EQ(u.at(3, 5, 0), 3.0f);
  EXPECT_EQ(upsample_nearest(z, 2, 2), z);
}

TEST(SimsRound, MaskAndQualityMonotoneWithinStep) {
  const TriMesh mesh = fixtures::test_sphere();
  ScheduleParams sp;
  sp.S = 3;
  GaussianOracle oracle({{0.7}, {0.2}});
  RoundConfig cfg;
  cfg.seed = 4;
  std::vector<std::uint8_t> prev_mask;
  QualityBuffer prev_q;
  int prev_step = -1, events = 0;
  SimsObserver obs;
  obs.on_view = [&](const ViewEvent& e) {
    ++events;
    if (e.step == prev_step) {
      for (std::size_t t = 0; t < e.mask.size(); ++t) {
        ASSERT_GE(e.mask[t], prev_mask[t]);
        ASSERT_GE(e.quality[t], prev_q[t]);
      }
    }
    prev_step = e.step;
    prev_mask = e.mask;
    prev_q = e.quality;
  };
  sims_round(mesh, make_cameras(CameraPreset::default9(), mesh, 0), {64, 64}, make_schedule(sp), oracle, cfg,
             std::nullopt, obs);
  EXPECT_EQ(events, 3 * 9);
}

TEST(SimsRound, NoiseLevelBookkeeping) {
  const TriMesh mesh = fixtures::test_sphere();
  ScheduleParams sp;
  sp.S = 5;
  const NoiseSchedule sched = make_schedule(sp);
  ZeroDenoiser zero;
  Recorder rec(zero);
  const auto cams = make_cameras(CameraPreset::default9(), mesh, 0);
  std::vector<int> steps;
  SimsObserver obs;
  obs.on_step = [&](int i, const LatentTexture&) { steps.push_back(i); };
  sims_round(mesh, cams, {64, 64}, sched, rec, RoundConfig{}, std::nullopt, obs);
  EXPECT_EQ(steps, (std::vector<int>{5, 4, 3, 2, 1}));
  ASSERT_EQ(rec.calls.size(), 5 * cams.size());
  for (std::size_t k = 0; k < rec.calls.size(); ++k) {
    const int i = 5 - static_cast<int>(k / cams.size());
    EXPECT_EQ(rec.calls[k].t, sched.time(i));
    EXPECT_EQ(rec.calls[k].alpha_bar, sched.alpha_bar(i));
    EXPECT_EQ(rec.calls[k].view, static_cast<int>(k % cams.size()));
  }
}

TEST(SimsRound, ViewsSeeConsistentTexture) {
  // Every view of a step renders the same texture outside the texels already
  // written in that step: z_in agrees with the step-start texture there.
  const TriMesh mesh = fixtures::test_sphere();
  ScheduleParams sp;
  sp.S = 2;
  GaussianOracle oracle({{0.7}, {0.2}});
  LatentTexture step_start = normal_grid(64, 64, 4, run_stream(0, Stream::init));
  int step = 2;
  SimsObserver obs;
  obs.on_view = [&](const ViewEvent& e) {
    if (e.step != step) return;
    if (e.view == 0) EXPECT_EQ(e.z_in, step_start);
    for (std::size_t t = 0; t < e.z_in.pixels(); ++t)
      if (!e.mask[t])
        for (int c = 0; c < 4; ++c) ASSERT_EQ(e.z_in.pixel(t)[c], step_start.pixel(t)[c]);
  };
  obs.on_step = [&](int i, const LatentTexture& z) {
    step_start = z;
    step = i - 1;
  };
  sims_round(mesh, make_cameras(CameraPreset::default9(), mesh, 0), {64, 64}, make_schedule(sp), oracle,
             RoundConfig{}, std::nullopt, obs);
}

TEST(SimsRound, RejectsBadInputs) {
  const TriMesh mesh = fixtures::test_sphere();
  ZeroDenoiser zero;
  const NoiseSchedule s = make_schedule(ScheduleParams{});
  EXPECT_THROW(sims_round(mesh, {}, {64, 64}, s, zero, RoundConfig{}), ShapeError);
  const auto cams = make_cameras(CameraPreset::default9(), mesh, 0);
  EXPECT_THROW(sims_round(mesh, cams, {60, 64}, s, zero, RoundConfig{}), ShapeError);
  EXPECT_THROW(sims_round(mesh, cams, {64, 64}, s, zero, RoundConfig{}, LatentTexture(32, 32, 4)), ShapeError);
}

TEST(SimsRound, SingleViewEquivalence) {
  const verify::CheckResult r = verify::single_view_equivalence();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(SimsRound, DeltaRecovery) {
  const verify::CheckResult r = verify::delta_recovery();
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(SimsConfig, JsonRoundTrip) {
  SimsConfig c;
  c.eta = 0.3;
  c.seed = 99;
  c.rounds = 1;
  c.refine_t = 600;
  const nlohmann::json j = c;
  const SimsConfig back = j.get<SimsConfig>();
  EXPECT_EQ(back.eta, 0.3);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.rounds, 1);
  EXPECT_EQ(back.refine_t, 600);
  EXPECT_EQ(nlohmann::json(back), j);
  // missing keys keep their defaults
  EXPECT_EQ(nlohmann::json::object().get<SimsConfig>().tau_coarse, 0.5);
}

TEST(RefineSchedule, KeepsStepDensity) {
  const ScheduleParams r = refine_schedule(ScheduleParams{}, 500);
  EXPECT_EQ(r.t_max, 500);
  EXPECT_EQ(r.t_min, 300);
  EXPECT_EQ(r.S, 14);  // 50 steps over 700 -> 200 * 50 / 700
  EXPECT_THROW(refine_schedule(ScheduleParams{}, 300), ScheduleError);
  EXPECT_THROW(refine_schedule(ScheduleParams{}, 1000), ScheduleError);
  const verify::CheckResult c = verify::refinement_policy();
  EXPECT_TRUE(c.passed) << c.detail;
}

TEST(NarrowCameras, ScalesTangentOfHalfFov) {
  const TriMesh mesh = fixtures::test_sphere();
  const auto cams = make_cameras(CameraPreset::default9(), mesh, 0);
  const auto narrow = narrow_cameras(cams, 1.5);
  for (std::size_t k = 0; k < cams.size(); ++k) {
    EXPECT_NEAR(std::tan(cams[k].fov_y / 2) / std::tan(narrow[k].fov_y / 2), 1.5, 1e-12);
    EXPECT_EQ(narrow[k].eye, cams[k].eye);
  }
}

TEST(Pipeline, OneRoundEqualsCoarseRoundBitwise) {
  const TriMesh mesh = fixtures::test_sphere();
  GaussianOracle oracle({{0.7}, {0.2}});
  SimsConfig cfg;
  cfg.rounds = 1;
  cfg.seed = 12;
  const PipelineResult p = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);

  RoundConfig rc;
  rc.seed = 12;
  rc.prompt = "a ball";
  rc.jitter = cfg.coarse_preset;
  const RoundResult r = sims_round(mesh, make_cameras(cfg.coarse_preset, mesh, 12),
                                   texture_resolution(mesh, Coarse{}, cfg.base_resolution),
                                   make_schedule(ScheduleParams{}), oracle, rc);
  EXPECT_EQ(p.z0, r.z0);
  EXPECT_EQ(p.covered, r.covered);
  EXPECT_EQ(p.manifest["rounds"].size(), 1u);
  EXPECT_FALSE(p.round2_init.has_value());
}

TEST(Pipeline, SeedDeterminism) {
  const TriMesh mesh = fixtures::test_sphere();
  GaussianOracle oracle({{0.7}, {0.2}});
  SimsConfig cfg;
  cfg.seed = 3;
  const PipelineResult a = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
  const PipelineResult b = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
  EXPECT_EQ(a.z0, b.z0);
  cfg.seed = 4;
  const PipelineResult c = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
  EXPECT_NE(a.z0, c.z0);
}

TEST(Pipeline, RefineRoundStartsAtRefineLevel) {
  const TriMesh mesh = fixtures::test_sphere();
  GaussianOracle oracle({{0.7}, {0.2}});
  SimsConfig cfg;
  cfg.seed = 8;
  const PipelineResult p = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
  EXPECT_EQ(p.manifest["refine_t"], 500);
  ASSERT_EQ(p.manifest["rounds"].size(), 2u);
  EXPECT_EQ(p.manifest["rounds"][1]["schedule"]["t_max"], 500);
  ASSERT_TRUE(p.round2_init && p.round1_upsampled);
  const double ab = make_schedule(ScheduleParams{}).alpha_bar_at(500);
  std::vector<double> noise;
  for (std::size_t k = 0; k < p.round2_init->size(); ++k)
    noise.push_back(p.round2_init->raw()[k] - std::sqrt(ab) * p.round1_upsampled->raw()[k]);
  EXPECT_NEAR(variance(noise) / (1 - ab), 1.0, 0.05);
  EXPECT_EQ(p.cameras.size(), 9u);
  EXPECT_EQ(p.xhat0.size(), 9u);
}

TEST(Pipeline, DeltaTargetRecoveredThroughBothRounds) {
  const TriMesh mesh = fixtures::test_sphere();
  // Target at the final texture resolution so each pixel reads its own texel.
  ZeroDenoiser zero;
  SimsConfig cfg;
  cfg.eta = 0;
  cfg.tau_coarse = 0;
  ScheduleParams sp;
  sp.S = 5;
  const auto dims = texfusion_pipeline(mesh, "", sp, zero, cfg).tex_dims;
  const LatentTexture target = normal_grid(dims.first, dims.second, 4, 31);
  DeltaOracle oracle = DeltaOracle::from_texture(mesh, target);
  const PipelineResult p = texfusion_pipeline(mesh, "a ball", ScheduleParams{}, oracle, cfg);
  ASSERT_EQ(p.tex_dims, dims);
  double worst = 0;
  std::size_t covered = 0;
  for (std::size_t t = 0; t < p.z0.pixels(); ++t) {
    if (!p.covered[t]) continue;
    ++covered;
    for (int c = 0; c < 4; ++c) worst = std::max(worst, double(std::abs(p.z0.pixel(t)[c] - target.pixel(t)[c])));
  }
  EXPECT_GT(covered, 1000u);  // bounded by the 9 x 64^2 view pixels, not the atlas size
  EXPECT_LT(worst, 2e-2);
}

TEST(Pipeline, RejectsBadRounds) {
  ZeroDenoiser zero;
  SimsConfig cfg;
  cfg.rounds = 3;
  EXPECT_THROW(texfusion_pipeline(fixtures::test_sphere(), "", ScheduleParams{}, zero, cfg), ScheduleError);
  EXPECT_THROW(texfusion_pipeline(fixtures::uv_sphere(6, 4), "", ScheduleParams{}, zero, SimsConfig{}), InvalidMesh);
}
