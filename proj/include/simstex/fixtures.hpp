#pragma once

// Analytic meshes and cameras with known raster properties.

#include <cmath>
#include <vector>

#include "simstex/geometry.hpp"

namespace simstex::fixtures {

/// Unit quad in the z = offset plane spanning [-0.5, 0.5]^2, one chart.
/// UV is laid out so that, seen from +z with `filling_camera`, texel (r, c)
/// lands exactly on pixel (r, c): u = x + 0.5, v = 0.5 - y.
inline TriMesh quad(double z_offset = 0.0) {
  TriMesh m;
  m.vertices = {{-0.5, -0.5, z_offset}, {0.5, -0.5, z_offset}, {0.5, 0.5, z_offset}, {-0.5, 0.5, z_offset}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  m.face_uvs = {{Vec2{0, 1}, Vec2{1, 1}, Vec2{1, 0}}, {Vec2{0, 1}, Vec2{1, 0}, Vec2{0, 0}}};
  m.chart_ids = {0, 0};
  return m;
}

/// Camera on the +z axis whose frustum exactly frames the unit quad.
inline Camera filling_camera(int size, double distance = 2.0) {
  Camera c;
  c.eye = {0, 0, distance};
  c.target = {0, 0, 0};
  c.up = {0, 1, 0};
  c.fov_y = 2.0 * std::atan(0.5 / distance);
  c.image_h = c.image_w = size;
  return c;
}

/// Same framing rotated about the vertical axis by `angle_deg`.
inline Camera orbit_camera(int size, double distance, double angle_deg) {
  Camera c = filling_camera(size, distance);
  const double a = deg2rad(angle_deg);
  c.eye = {distance * std::sin(a), 0, distance * std::cos(a)};
  return c;
}

/// Latitude-longitude sphere of radius 0.5 with triangle-fan caps:
/// 2 * slices * (stacks - 1) faces. No UVs.
inline TriMesh uv_sphere(int slices, int stacks, double radius = 0.5) {
  TriMesh m;
  m.vertices.push_back({0, radius, 0});
  for (int s = 1; s < stacks; ++s) {
    const double phi = kPi * s / stacks;
    for (int k = 0; k < slices; ++k) {
      const double th = 2 * kPi * k / slices;
      m.vertices.push_back({radius * std::sin(phi) * std::cos(th), radius * std::cos(phi),
                            radius * std::sin(phi) * std::sin(th)});
    }
  }
  m.vertices.push_back({0, -radius, 0});
  const int bottom = static_cast<int>(m.vertices.size()) - 1;
  const auto ring = [&](int s, int k) { return 1 + (s - 1) * slices + (k % slices); };
  for (int k = 0; k < slices; ++k) m.faces.push_back({0, ring(1, k + 1), ring(1, k)});
  for (int s = 1; s < stacks - 1; ++s)
    for (int k = 0; k < slices; ++k) {
      m.faces.push_back({ring(s, k), ring(s, k + 1), ring(s + 1, k + 1)});
      m.faces.push_back({ring(s, k), ring(s + 1, k + 1), ring(s + 1, k)});
    }
  for (int k = 0; k < slices; ++k) m.faces.push_back({bottom, ring(stacks - 1, k), ring(stacks - 1, k + 1)});
  return m;
}

/// The 100-face test sphere, normalized and atlased at `atlas_texels`.
inline TriMesh test_sphere(int atlas_texels = 64) {
  return naive_atlas(normalize_mesh(uv_sphere(10, 6)), atlas_texels);
}

}  // namespace simstex::fixtures
