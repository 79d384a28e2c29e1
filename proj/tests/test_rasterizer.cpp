#include <gtest/gtest.h>

#include <cmath>

#include "simstex/fixtures.hpp"
#include "simstex/rasterizer.hpp"
#include "simstex/verify.hpp"

using namespace simstex;

namespace {

double inner(const Grid<float>& a, const Grid<float>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += double(a.raw()[k]) * b.raw()[k];
  return s;
}

TriMesh two_quads() {
  // Near quad at z = 0.2 (charts in the left half of UV), far quad at z = -0.2 (right half).
  TriMesh near = fixtures::quad(0.2), far = fixtures::quad(-0.2);
  TriMesh m = near;
  for (auto& t : m.face_uvs)
    for (auto& uv : t) uv.u *= 0.5;
  const int off = static_cast<int>(m.vertices.size());
  m.vertices.insert(m.vertices.end(), far.vertices.begin(), far.vertices.end());
  for (std::size_t f = 0; f < far.faces.size(); ++f) {
    m.faces.push_back({far.faces[f][0] + off, far.faces[f][1] + off, far.faces[f][2] + off});
    auto t = far.face_uvs[f];
    for (auto& uv : t) uv.u = 0.5 + 0.5 * uv.u;
    m.face_uvs.push_back(t);
    m.chart_ids.push_back(1);
  }
  return m;
}

}  // namespace

TEST(Rasterize, FillingQuadHasUnitJacobianAndIdentityMap) {
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::filling_camera(32), 32, 32);
  ASSERT_EQ(r.foreground_count(), 32u * 32);
  for (std::size_t i = 0; i < r.pixels(); ++i) {
    EXPECT_NEAR(r.jac[i], 1.0f, 1e-4f);
    EXPECT_EQ(r.texel_index[i], static_cast<int>(i));
    EXPECT_NEAR(r.depth[i], 2.0f, 1e-5f);
  }
}

TEST(Rasterize, TiltedQuadJacobianNearTwoAtCenter) {
  // Rotating the camera 60 degrees about the vertical axis at large distance
  // stretches the footprint by 1/cos(60) = 2 along one axis.
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::orbit_camera(64, 4.0, 60.0), 64, 64);
  const std::size_t center = 32 * 64 + 32;
  ASSERT_TRUE(r.foreground(center));
  EXPECT_NEAR(r.jac[center], 2.0f, 0.05f);
}

TEST(Rasterize, CameraFacingAwaySeesNothing) {
  Camera cam = fixtures::filling_camera(16);
  cam.target = {0, 0, 5};
  const RasterOutput r = rasterize(fixtures::quad(), cam, 16, 16);
  EXPECT_EQ(r.foreground_count(), 0u);
  for (int t : r.texel_index) EXPECT_EQ(t, kBackground);
}

TEST(Rasterize, OcclusionNearerQuadWins) {
  const TriMesh m = two_quads();
  Camera cam = fixtures::filling_camera(32, 2.0);
  cam.fov_y = 2 * std::atan(0.8 / 2.0);
  const RasterOutput r = rasterize(m, cam, 32, 32);
  ASSERT_GT(r.foreground_count(), 0u);
  for (std::size_t i = 0; i < r.pixels(); ++i) {
    if (!r.foreground(i)) continue;
    EXPECT_LT(r.face_id[i], 2);
    EXPECT_LT(r.texel_index[i] % 32, 16) << "far-quad texel leaked at pixel " << i;
  }
}

TEST(Rasterize, BuffersIndependentOfTextureValues) {
  const TriMesh s = fixtures::test_sphere();
  const Camera cam = make_cameras(CameraPreset::default9(), s, 0)[2];
  const RasterOutput a = rasterize(s, cam, 64, 64), b = rasterize(s, cam, 64, 64);
  EXPECT_EQ(a.jac, b.jac);
  EXPECT_EQ(a.depth, b.depth);
  EXPECT_EQ(a.texel_index, b.texel_index);
  // Rendering scaled textures leaves the raster untouched and scales the image.
  const LatentTexture z = normal_grid(64, 64, 4, 1);
  LatentTexture z3 = z;
  for (float& v : z3.values()) v *= 3;
  const LatentImage i1 = render_texture(z, a), i3 = render_texture(z3, a);
  for (std::size_t k = 0; k < i1.size(); ++k) EXPECT_EQ(i3.raw()[k], i1.raw()[k] * 3);
}

TEST(Rasterize, RejectsMeshWithoutUvs) {
  EXPECT_THROW(rasterize(fixtures::uv_sphere(6, 4), fixtures::filling_camera(8), 8, 8), InvalidMesh);
}

TEST(RenderTexture, ConstantTexture) {
  const TriMesh s = fixtures::test_sphere();
  const RasterOutput r = rasterize(s, make_cameras(CameraPreset::default9(), s, 0)[0], 64, 64);
  const LatentImage img = render_texture(LatentTexture(64, 64, 4, 0.25f), r);
  for (std::size_t i = 0; i < r.pixels(); ++i)
    for (float v : img.pixel(i)) EXPECT_EQ(v, r.foreground(i) ? 0.25f : 0.0f);
}

TEST(RenderTexture, OneHotSelectsExactlyItsPixels) {
  const TriMesh s = fixtures::test_sphere();
  const RasterOutput r = rasterize(s, make_cameras(CameraPreset::default9(), s, 0)[1], 64, 64);
  const int hot = r.texel_index[32 * 64 + 32];
  ASSERT_NE(hot, kBackground);
  LatentTexture z(64, 64, 1, 0.0f);
  z.raw()[static_cast<std::size_t>(hot)] = 1.0f;
  const LatentImage img = render_texture(z, r);
  for (std::size_t i = 0; i < r.pixels(); ++i) EXPECT_EQ(img.raw()[i] != 0.0f, r.texel_index[i] == hot);
}

TEST(RenderTexture, ChannelMismatchThrows) {
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::filling_camera(8), 8, 8);
  EXPECT_THROW(render_texture(LatentTexture(16, 16, 4), r), ShapeError);
}

TEST(InverseRender, ZeroImageGivesCoverageCounts) {
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::filling_camera(16), 16, 16);
  const Scatter s = inverse_render(LatentImage(16, 16, 4, 0.0f), r);
  for (float v : s.sum.values()) EXPECT_EQ(v, 0.0f);
  for (float c : s.count.values()) EXPECT_EQ(c, 1.0f);
}

TEST(InverseRender, FourPixelsPerTexel) {
  // 8x8 image of the quad over a 4x4 texture: each texel receives a 2x2 block.
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::filling_camera(8), 4, 4);
  const Scatter s = inverse_render(LatentImage(8, 8, 1, 2.0f), r);
  for (std::size_t t = 0; t < 16; ++t) {
    EXPECT_EQ(s.count.raw()[t], 4.0f);
    EXPECT_EQ(s.sum.raw()[t], 8.0f);
  }
}

TEST(InverseRender, RoundTripReproducesImage) {
  const TriMesh s = fixtures::test_sphere();
  for (const Camera& cam : make_cameras(CameraPreset::default9(), s, 0)) {
    const RasterOutput r = rasterize(s, cam, 64, 64);
    const LatentImage img = render_texture(normal_grid(64, 64, 4, 5), r);
    const Scatter sc = inverse_render(img, r);
    LatentTexture back(64, 64, 4, 0.0f);
    for (std::size_t t = 0; t < back.pixels(); ++t)
      if (sc.count.raw()[t] > 0)
        for (int c = 0; c < 4; ++c) back.pixel(t)[c] = sc.sum.pixel(t)[c] / sc.count.raw()[t];
    // Equal up to the rounding of sum / count for repeated identical values.
    const LatentImage again = render_texture(back, r);
    for (std::size_t k = 0; k < img.size(); ++k)
      ASSERT_NEAR(again.raw()[k], img.raw()[k], 2e-6f * std::max(1.0f, std::abs(img.raw()[k])));
  }
}

TEST(InverseRender, ProjectionIsIdempotentOnCoveredTexels) {
  const TriMesh s = fixtures::test_sphere();
  const RasterOutput r = rasterize(s, make_cameras(CameraPreset::default9(), s, 0)[3], 64, 64);
  const auto project = [&](const LatentTexture& z) {
    const Scatter sc = inverse_render(render_texture(z, r), r);
    LatentTexture out = z;
    for (std::size_t t = 0; t < z.pixels(); ++t)
      if (sc.count.raw()[t] > 0)
        for (int c = 0; c < 4; ++c) out.pixel(t)[c] = sc.sum.pixel(t)[c] / sc.count.raw()[t];
    return out;
  };
  const LatentTexture once = project(normal_grid(64, 64, 4, 8));
  const LatentTexture twice = project(once);
  for (std::size_t k = 0; k < once.size(); ++k)
    ASSERT_NEAR(twice.raw()[k], once.raw()[k], 2e-6f * std::max(1.0f, std::abs(once.raw()[k])));
}

TEST(InverseRender, AdjointIdentityOnRandomFixtures) {
  const auto fx = verify::adjoint_fixtures(20, 77);
  for (std::size_t k = 0; k < fx.size(); ++k) {
    const RasterOutput r = rasterize(fx[k].mesh, fx[k].camera, fx[k].tex_h, fx[k].tex_w);
    const LatentTexture z = normal_grid(fx[k].tex_h, fx[k].tex_w, 4, 10 + k);
    const LatentImage x = normal_grid(r.height, r.width, 4, 20 + k);
    const double lhs = inner(render_texture(z, r), x);
    const double rhs = inner(z, inverse_render(x, r).sum);
    EXPECT_LE(std::abs(lhs - rhs), 1e-5 * std::max({std::abs(lhs), std::abs(rhs), 1e-30})) << "fixture " << k;
  }
}

TEST(FillBackground, AllForegroundUnchanged) {
  const RasterOutput r = rasterize(fixtures::quad(), fixtures::filling_camera(16), 16, 16);
  const LatentImage img = normal_grid(16, 16, 4, 2);
  NormalStream rng(3);
  EXPECT_EQ(fill_background(img, r, rng), img);
}

TEST(FillBackground, AllBackgroundIsStandardNormal) {
  Camera cam = fixtures::filling_camera(64);
  cam.target = {0, 0, 5};
  const RasterOutput r = rasterize(fixtures::quad(), cam, 64, 64);
  NormalStream rng(4);
  const LatentImage img = fill_background(LatentImage(64, 64, 4, 0.0f), r, rng);
  for (int c = 0; c < 4; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < img.pixels(); ++i) {
      const double v = img.pixel(i)[c];
      s += v;
      s2 += v * v;
    }
    const double n = double(img.pixels()), mean = s / n;
    EXPECT_NEAR(mean, 0.0, 0.05);
    EXPECT_NEAR(s2 / n - mean * mean, 1.0, 0.05);
  }
  NormalStream again(4);
  EXPECT_EQ(fill_background(LatentImage(64, 64, 4, 0.0f), r, again), img);
}

TEST(NormalizedDepth, RangeAndBackground) {
  const TriMesh s = fixtures::test_sphere();
  const RasterOutput r = rasterize(s, make_cameras(CameraPreset::default9(), s, 0)[0], 64, 64);
  const ScalarGrid d = normalized_depth(r);
  float lo = 1, hi = 0;
  for (std::size_t i = 0; i < r.pixels(); ++i) {
    if (!r.foreground(i)) {
      EXPECT_EQ(d.raw()[i], 0.0f);
      continue;
    }
    lo = std::min(lo, d.raw()[i]);
    hi = std::max(hi, d.raw()[i]);
  }
  EXPECT_EQ(lo, 0.0f);
  EXPECT_EQ(hi, 1.0f);
}
