#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "simstex/core.hpp"
#include "simstex/geometry.hpp"

namespace simstex {

inline constexpr int kBackground = -1;

/// Per-pixel geometry buffer produced by rasterizing one camera view against
/// a texture of tex_h x tex_w texels. Pixels are stored row-major, row 0 at
/// the top of the image.
struct RasterOutput {
  int height = 0, width = 0;
  int tex_h = 0, tex_w = 0;
  std::vector<int> face_id;      // kBackground where nothing was hit
  std::vector<Vec2> uv;          // texel units: (u * tex_w, v * tex_h)
  std::vector<int> texel_index;  // row * tex_w + col of the nearest texel, or kBackground
  std::vector<float> depth;      // eye-space depth along the view axis
  std::vector<float> jac;        // |du/dp dv/dq - du/dq dv/dp|, texels^2 per pixel^2
  std::vector<Vec3> xyz;         // world-space surface point

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool foreground(std::size_t i) const { return face_id[i] != kBackground; }
  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (int f : face_id) n += f != kBackground;
    return n;
  }
};

/// Orthonormal camera frame: right, up, forward (towards the target).
struct CameraFrame {
  Vec3 right, up, forward;
  double tan_half;
  double aspect;

  explicit CameraFrame(const Camera& cam) {
    if (cam.eye == cam.target) throw ShapeError("camera eye equals target");
    if (!(cam.fov_y > 0 && cam.fov_y < kPi)) throw ShapeError("camera fov_y outside (0, pi)");
    forward = normalized(cam.target - cam.eye);
    const Vec3 r = cross(forward, cam.up);
    if (norm(r) < 1e-12) throw ShapeError("camera up vector parallel to view direction");
    right = normalized(r);
    up = cross(right, forward);
    tan_half = std::tan(cam.fov_y / 2);
    aspect = static_cast<double>(cam.image_w) / cam.image_h;
  }
};

/// Rasterize a UV'd mesh with a pinhole camera. Occlusion is resolved by a
/// depth buffer (strictly nearer wins, so the lower face id keeps ties).
/// Triangles with a vertex closer than the near plane are skipped, as are
/// triangles with zero screen-space area.
inline RasterOutput rasterize(const TriMesh& mesh, const Camera& cam, int tex_h, int tex_w) {
  if (!mesh.has_uvs()) throw InvalidMesh("rasterize needs a UV'd mesh");
  if (tex_h <= 0 || tex_w <= 0) throw ShapeError("texture dimensions must be positive");
  const CameraFrame frame(cam);
  const int h = cam.image_h, w = cam.image_w;
  constexpr double near_plane = 1e-4;

  RasterOutput out;
  out.height = h;
  out.width = w;
  out.tex_h = tex_h;
  out.tex_w = tex_w;
  const std::size_t n = out.pixels();
  out.face_id.assign(n, kBackground);
  out.uv.assign(n, Vec2{});
  out.texel_index.assign(n, kBackground);
  out.depth.assign(n, 0.0f);
  out.jac.assign(n, 0.0f);
  out.xyz.assign(n, Vec3{});
  std::vector<double> zbuf(n, std::numeric_limits<double>::infinity());

  // Project every vertex once.
  struct Projected {
    double sx, sy, inv_depth;
    bool valid;
  };
  std::vector<Projected> proj(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3 d = mesh.vertices[i] - cam.eye;
    const double z = dot(d, frame.forward);
    if (z < near_plane) {
      proj[i] = {0, 0, 0, false};
      continue;
    }
    const double nx = dot(d, frame.right) / z / (frame.tan_half * frame.aspect);
    const double ny = dot(d, frame.up) / z / frame.tan_half;
    proj[i] = {(nx + 1) * 0.5 * w, (1 - ny) * 0.5 * h, 1.0 / z, true};
  }

  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    const Projected& a = proj[face[0]];
    const Projected& b = proj[face[1]];
    const Projected& c = proj[face[2]];
    if (!a.valid || !b.valid || !c.valid) continue;
    const std::array<double, 3> xs{a.sx, b.sx, c.sx}, ys{a.sy, b.sy, c.sy};
    const std::array<double, 3> iw{a.inv_depth, b.inv_depth, c.inv_depth};
    const double area2 = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0]);
    if (std::abs(area2) < 1e-12) continue;

    const double minx = std::min({xs[0], xs[1], xs[2]}), maxx = std::max({xs[0], xs[1], xs[2]});
    const double miny = std::min({ys[0], ys[1], ys[2]}), maxy = std::max({ys[0], ys[1], ys[2]});
    if (maxx < 0 || maxy < 0 || minx > w || miny > h) continue;
    const int c0 = std::max(0, static_cast<int>(std::ceil(minx - 0.5)));
    const int c1 = std::min(w - 1, static_cast<int>(std::floor(maxx - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(miny - 0.5)));
    const int r1 = std::min(h - 1, static_cast<int>(std::floor(maxy - 0.5)));
    if (c0 > c1 || r0 > r1) continue;

    // Texel-unit UVs scaled by 1/depth, and the screen gradients of the
    // normalized edge functions (the affine screen barycentrics).
    const auto& tuv = mesh.face_uvs[f];
    std::array<double, 3> U, V, dbx, dby;
    for (int k = 0; k < 3; ++k) {
      U[k] = tuv[k].u * tex_w;
      V[k] = tuv[k].v * tex_h;
      const int k1 = (k + 1) % 3, k2 = (k + 2) % 3;
      dbx[k] = (ys[k1] - ys[k2]) / area2;
      dby[k] = (xs[k2] - xs[k1]) / area2;
    }
    double dD_dx = 0, dD_dy = 0, dNu_dx = 0, dNu_dy = 0, dNv_dx = 0, dNv_dy = 0;
    for (int k = 0; k < 3; ++k) {
      dD_dx += dbx[k] * iw[k];
      dD_dy += dby[k] * iw[k];
      dNu_dx += dbx[k] * iw[k] * U[k];
      dNu_dy += dby[k] * iw[k] * U[k];
      dNv_dx += dbx[k] * iw[k] * V[k];
      dNv_dy += dby[k] * iw[k] * V[k];
    }
    const Vec3& pa = mesh.vertices[face[0]];
    const Vec3& pb = mesh.vertices[face[1]];
    const Vec3& pc = mesh.vertices[face[2]];

    for (int r = r0; r <= r1; ++r) {
      const double py = r + 0.5;
      for (int col = c0; col <= c1; ++col) {
        const double px = col + 0.5;
        std::array<double, 3> bary;
        bool inside = true;
        for (int k = 0; k < 3; ++k) {
          const int k1 = (k + 1) % 3, k2 = (k + 2) % 3;
          bary[k] = ((xs[k1] - px) * (ys[k2] - py) - (xs[k2] - px) * (ys[k1] - py)) / area2;
          inside = inside && bary[k] >= 0;
        }
        if (!inside) continue;
        const double D = bary[0] * iw[0] + bary[1] * iw[1] + bary[2] * iw[2];
        const double depth = 1.0 / D;
        const std::size_t i = static_cast<std::size_t>(r) * w + col;
        if (!(depth < zbuf[i])) continue;
        zbuf[i] = depth;

        std::array<double, 3> pc_bary;
        for (int k = 0; k < 3; ++k) pc_bary[k] = bary[k] * iw[k] / D;
        const double u = pc_bary[0] * U[0] + pc_bary[1] * U[1] + pc_bary[2] * U[2];
        const double v = pc_bary[0] * V[0] + pc_bary[1] * V[1] + pc_bary[2] * V[2];
        // u = Nu / D with Nu, D affine in screen space.
        const double du_dp = (dNu_dx - u * dD_dx) / D, du_dq = (dNu_dy - u * dD_dy) / D;
        const double dv_dp = (dNv_dx - v * dD_dx) / D, dv_dq = (dNv_dy - v * dD_dy) / D;

        out.face_id[i] = static_cast<int>(f);
        out.uv[i] = {u, v};
        const int tc = std::clamp(static_cast<int>(std::floor(u)), 0, tex_w - 1);
        const int tr = std::clamp(static_cast<int>(std::floor(v)), 0, tex_h - 1);
        out.texel_index[i] = tr * tex_w + tc;
        out.depth[i] = static_cast<float>(depth);
        out.jac[i] = static_cast<float>(std::abs(du_dp * dv_dq - du_dq * dv_dp));
        out.xyz[i] = pa * pc_bary[0] + pb * pc_bary[1] + pc * pc_bary[2];
      }
    }
  }
  return out;
}

inline void check_raster_texture(const RasterOutput& raster, const Grid<float>& tex) {
  if (tex.height() != raster.tex_h || tex.width() != raster.tex_w)
    throw ShapeError("texture is " + std::to_string(tex.height()) + "x" + std::to_string(tex.width()) +
                     " but raster was built for " + std::to_string(raster.tex_h) + "x" +
                     std::to_string(raster.tex_w));
}

/// Nearest-texel fetch: foreground pixel = tex[texel_index], background = 0.
inline LatentImage render_texture(const LatentTexture& tex, const RasterOutput& raster) {
  check_raster_texture(raster, tex);
  const int c = tex.channels();
  LatentImage img(raster.height, raster.width, c, 0.0f);
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    const int t = raster.texel_index[i];
    if (t == kBackground) continue;
    const auto src = tex.pixel(static_cast<std::size_t>(t));
    std::copy(src.begin(), src.end(), img.pixel(i).begin());
  }
  return img;
}

struct Scatter {
  LatentTexture sum;
  ScalarGrid count;
};

/// Adjoint of render_texture: scatter-add foreground pixels into their
/// texels (row-major pixel order) and count contributions per texel.
inline Scatter inverse_render(const LatentImage& img, const RasterOutput& raster) {
  if (img.height() != raster.height || img.width() != raster.width)
    throw ShapeError("image dimensions do not match the raster");
  const int c = img.channels();
  Scatter s{LatentTexture(raster.tex_h, raster.tex_w, c, 0.0f), ScalarGrid(raster.tex_h, raster.tex_w, 1, 0.0f)};
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    const int t = raster.texel_index[i];
    if (t == kBackground) continue;
    const auto src = img.pixel(i);
    auto dst = s.sum.pixel(static_cast<std::size_t>(t));
    for (int k = 0; k < c; ++k) dst[k] += src[k];
    s.count.raw()[static_cast<std::size_t>(t)] += 1.0f;
  }
  return s;
}

/// Replace background pixels with i.i.d. N(0, 1) draws, in row-major order.
inline LatentImage fill_background(LatentImage img, const RasterOutput& raster, NormalStream& rng) {
  if (img.height() != raster.height || img.width() != raster.width)
    throw ShapeError("image dimensions do not match the raster");
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    if (raster.foreground(i)) continue;
    for (float& v : img.pixel(i)) v = rng.next();
  }
  return img;
}

/// Linear eye-space depth min-max normalized to [0, 1] over the foreground;
/// background is 0.
inline ScalarGrid normalized_depth(const RasterOutput& raster) {
  ScalarGrid d(raster.height, raster.width, 1, 0.0f);
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    if (!raster.foreground(i)) continue;
    lo = std::min(lo, raster.depth[i]);
    hi = std::max(hi, raster.depth[i]);
  }
  const float span = hi - lo;
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    if (!raster.foreground(i)) continue;
    d.raw()[i] = span > 0 ? (raster.depth[i] - lo) / span : 0.0f;
  }
  return d;
}

}  // namespace simstex
