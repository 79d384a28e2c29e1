#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simstex/core.hpp"

namespace simstex {

/// Triangle mesh with an optional per-corner UV parameterization.
/// face_uvs and chart_ids are either empty or sized like faces.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::array<Vec2, 3>> face_uvs;
  std::vector<int> chart_ids;

  bool has_uvs() const { return !faces.empty() && face_uvs.size() == faces.size(); }
  std::size_t face_count() const { return faces.size(); }
  bool operator==(const TriMesh&) const = default;
};

struct Camera {
  Vec3 eye{1.5, 0, 0};
  Vec3 target{0, 0, 0};
  Vec3 up{0, 1, 0};
  double fov_y = deg2rad(60.0);
  int image_h = 64;
  int image_w = 64;
};

enum class PresetKind { default9, jittered18, human24 };

struct CameraPreset {
  PresetKind kind = PresetKind::default9;
  double distance = 1.5;
  std::vector<double> azimuths_deg{0, 45, 90, 135, 180, 225, 270, 315};
  std::vector<double> elevations_deg{30};
  std::vector<double> y_offsets{0.3, 0.0, -0.3};
  double jitter_deg = 10.0;
  double fov_margin = 1.05;
  int image_size = 64;

  static CameraPreset default9() { return {}; }
  static CameraPreset jittered18() {
    CameraPreset p;
    p.kind = PresetKind::jittered18;
    return p;
  }
  static CameraPreset human24() {
    CameraPreset p;
    p.kind = PresetKind::human24;
    p.elevations_deg = {0};
    return p;
  }
};

// ---------------------------------------------------------------------------
// Validation

inline void validate_mesh(const TriMesh& mesh) {
  if (mesh.vertices.empty() || mesh.faces.empty()) throw InvalidMesh("mesh has no vertices or faces");
  const int nv = static_cast<int>(mesh.vertices.size());
  for (const auto& f : mesh.faces)
    for (int idx : f)
      if (idx < 0 || idx >= nv) throw InvalidMesh("face index out of range");
  if (!mesh.face_uvs.empty()) {
    if (mesh.face_uvs.size() != mesh.faces.size()) throw InvalidMesh("face_uvs not sized like faces");
    for (const auto& tri : mesh.face_uvs)
      for (const auto& uv : tri)
        if (!(uv.u >= 0 && uv.u <= 1 && uv.v >= 0 && uv.v <= 1)) throw InvalidMesh("uv outside [0,1]^2");
  }
  if (!mesh.chart_ids.empty() && mesh.chart_ids.size() != mesh.faces.size())
    throw InvalidMesh("chart_ids not sized like faces");
}

// ---------------------------------------------------------------------------
// Normalization

struct Bounds {
  Vec3 lo, hi;
  Vec3 center() const { return (lo + hi) * 0.5; }
  double longest_side() const { return std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}); }
};

inline Bounds bounds_of(const std::vector<Vec3>& pts) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  Bounds b{{inf, inf, inf}, {-inf, -inf, -inf}};
  for (const auto& p : pts) {
    b.lo = {std::min(b.lo.x, p.x), std::min(b.lo.y, p.y), std::min(b.lo.z, p.z)};
    b.hi = {std::max(b.hi.x, p.x), std::max(b.hi.y, p.y), std::max(b.hi.z, p.z)};
  }
  return b;
}

/// Center the bounding box at the origin and scale its longest side to 1.
/// Meshes already normalized up to rounding are returned unchanged, which
/// makes the operation idempotent bit for bit.
inline TriMesh normalize_mesh(const TriMesh& mesh) {
  if (mesh.vertices.empty() || mesh.faces.empty()) throw InvalidMesh("cannot normalize an empty mesh");
  const Bounds b = bounds_of(mesh.vertices);
  const double side = b.longest_side();
  if (!(side > 0) || !std::isfinite(side)) throw InvalidMesh("degenerate bounding box");
  const Vec3 c = b.center();
  constexpr double tol = 8 * std::numeric_limits<double>::epsilon();
  if (std::abs(side - 1.0) <= tol && std::abs(c.x) <= tol && std::abs(c.y) <= tol && std::abs(c.z) <= tol)
    return mesh;
  TriMesh out = mesh;
  for (auto& v : out.vertices) v = (v - c) / side;
  return out;
}

inline double bounding_radius(const TriMesh& mesh) {
  double r = 0;
  for (const auto& v : mesh.vertices) r = std::max(r, norm(v));
  return r;
}

inline double face_area(const TriMesh& mesh, std::size_t f) {
  const auto& [a, b, c] = mesh.faces[f];
  return 0.5 * norm(cross(mesh.vertices[b] - mesh.vertices[a], mesh.vertices[c] - mesh.vertices[a]));
}

inline double uv_face_area(const std::array<Vec2, 3>& t) {
  return 0.5 * std::abs((t[1].u - t[0].u) * (t[2].v - t[0].v) - (t[2].u - t[0].u) * (t[1].v - t[0].v));
}

inline double surface_area(const TriMesh& mesh) {
  double a = 0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) a += face_area(mesh, f);
  return a;
}

// ---------------------------------------------------------------------------
// UV-space rasterization

/// Visit every texel of an H x W grid whose center lies inside (edges
/// inclusive) the UV triangle of a face. Faces are visited in ascending id
/// order, texels in row-major order within a face. The callback receives the
/// face id, texel row/col and the barycentric weights of the texel center.
template <typename Fn>
void for_each_uv_texel(const TriMesh& mesh, int tex_h, int tex_w, Fn&& fn) {
  if (!mesh.has_uvs()) throw InvalidMesh("mesh has no UV parameterization");
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.face_uvs[f];
    std::array<double, 3> xs, ys;
    for (int k = 0; k < 3; ++k) {
      xs[k] = t[k].u * tex_w;
      ys[k] = t[k].v * tex_h;
    }
    const double area2 = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0]);
    if (area2 == 0) continue;
    const int c0 = std::max(0, static_cast<int>(std::floor(std::min({xs[0], xs[1], xs[2]}) - 0.5)));
    const int c1 = std::min(tex_w - 1, static_cast<int>(std::ceil(std::max({xs[0], xs[1], xs[2]}) - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::floor(std::min({ys[0], ys[1], ys[2]}) - 0.5)));
    const int r1 = std::min(tex_h - 1, static_cast<int>(std::ceil(std::max({ys[0], ys[1], ys[2]}) - 0.5)));
    for (int r = r0; r <= r1; ++r) {
      const double py = r + 0.5;
      for (int c = c0; c <= c1; ++c) {
        const double px = c + 0.5;
        // Sub-triangle areas opposite each vertex, signed like area2.
        const double w0 = (xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py);
        const double w1 = (xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py);
        const double w2 = (xs[0] - px) * (ys[1] - py) - (xs[1] - px) * (ys[0] - py);
        const bool inside = area2 > 0 ? (w0 >= 0 && w1 >= 0 && w2 >= 0) : (w0 <= 0 && w1 <= 0 && w2 <= 0);
        if (!inside) continue;
        fn(static_cast<int>(f), r, c, std::array<double, 3>{w0 / area2, w1 / area2, w2 / area2});
      }
    }
  }
}

/// Number of texels in a grid x grid UV raster claimed by faces of two
/// different charts. Zero for a valid chart layout.
inline std::size_t count_chart_overlaps(const TriMesh& mesh, int grid = 1024) {
  std::vector<int> owner(static_cast<std::size_t>(grid) * grid, -1);
  std::size_t conflicts = 0;
  std::vector<char> counted(owner.size(), 0);
  const auto chart_of = [&](int f) { return mesh.chart_ids.empty() ? f : mesh.chart_ids[f]; };
  for_each_uv_texel(mesh, grid, grid, [&](int f, int r, int c, const auto&) {
    const std::size_t i = static_cast<std::size_t>(r) * grid + c;
    if (owner[i] < 0) {
      owner[i] = chart_of(f);
    } else if (owner[i] != chart_of(f) && !counted[i]) {
      counted[i] = 1;
      ++conflicts;
    }
  });
  return conflicts;
}

/// Fraction of the unit UV square covered by charts.
inline double uv_coverage_fraction(const TriMesh& mesh) {
  double a = 0;
  for (const auto& t : mesh.face_uvs) a += uv_face_area(t);
  return a;
}

// ---------------------------------------------------------------------------
// Atlas fallback

/// Give every face its own chart on a square grid of cells. Each triangle is
/// laid out with its own shape, scaled to fit its cell minus a one-texel
/// gutter on every side, measured at `atlas_texels` resolution.
inline TriMesh naive_atlas(const TriMesh& mesh, int atlas_texels) {
  validate_mesh(TriMesh{mesh.vertices, mesh.faces, {}, {}});
  const std::size_t nf = mesh.faces.size();
  const int cells = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(nf))));
  const double cell = static_cast<double>(atlas_texels) / cells;
  // A cell needs the two gutters plus at least two texels of interior.
  if (cell < 4.0)
    throw AtlasOverflow(std::to_string(nf) + " faces do not fit a " + std::to_string(atlas_texels) +
                        "^2 atlas with gutters");
  TriMesh out = mesh;
  out.face_uvs.resize(nf);
  out.chart_ids.resize(nf);
  const double interior = cell - 2.0;
  for (std::size_t f = 0; f < nf; ++f) {
    const auto& [ia, ib, ic] = mesh.faces[f];
    const Vec3 e1 = mesh.vertices[ib] - mesh.vertices[ia];
    const Vec3 e2 = mesh.vertices[ic] - mesh.vertices[ia];
    const double l1 = norm(e1);
    std::array<Vec2, 3> local{};
    const double area2 = norm(cross(e1, e2));
    if (l1 > 0 && area2 > 1e-12 * l1 * l1) {
      local = {Vec2{0, 0}, Vec2{l1, 0}, Vec2{dot(e2, e1) / l1, area2 / l1}};
    } else {
      local = {Vec2{0, 0}, Vec2{1, 0}, Vec2{0, 1}};
    }
    const double lo_u = std::min({local[0].u, local[1].u, local[2].u});
    const double hi_u = std::max({local[0].u, local[1].u, local[2].u});
    const double hi_v = std::max({local[0].v, local[1].v, local[2].v});
    const double scale = interior / std::max(hi_u - lo_u, hi_v);
    const int gx = static_cast<int>(f) % cells;
    const int gy = static_cast<int>(f) / cells;
    const double ox = gx * cell + 1.0, oy = gy * cell + 1.0;
    for (int k = 0; k < 3; ++k) {
      const double tx = ox + (local[k].u - lo_u) * scale;
      const double ty = oy + local[k].v * scale;
      out.face_uvs[f][k] = {std::clamp(tx / atlas_texels, 0.0, 1.0), std::clamp(ty / atlas_texels, 0.0, 1.0)};
    }
    out.chart_ids[f] = static_cast<int>(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cameras

inline Vec3 spherical_eye(double distance, double elevation_deg, double azimuth_deg) {
  const double el = deg2rad(elevation_deg), az = deg2rad(azimuth_deg);
  return {distance * std::cos(el) * std::cos(az), distance * std::sin(el), distance * std::cos(el) * std::sin(az)};
}

/// World +y unless the view direction is (nearly) vertical, then -x so that
/// the model's front (+x) lands at the bottom of a top-down image.
inline Vec3 default_up(const Vec3& eye, const Vec3& target) {
  const Vec3 dir = normalized(target - eye);
  if (std::abs(dir.y) > 0.999) return {-1, 0, 0};
  return {0, 1, 0};
}

/// Vertical FOV that fits the mesh's bounding sphere with the given margin.
inline double fit_fov(double radius, double distance, double margin) {
  return 2.0 * std::atan(radius * margin / distance);
}

inline Camera make_camera(const Vec3& eye, const Vec3& target, double fov_y, int size) {
  Camera c;
  c.eye = eye;
  c.target = target;
  c.up = default_up(eye, target);
  c.fov_y = fov_y;
  c.image_h = c.image_w = size;
  return c;
}

/// Place the cameras of a preset around a normalized mesh. The seed only
/// matters for jittered18.
inline std::vector<Camera> make_cameras(const CameraPreset& preset, const TriMesh& mesh, std::uint64_t seed) {
  const double fov = fit_fov(bounding_radius(mesh), preset.distance, preset.fov_margin);
  const double d = preset.distance;
  const int size = preset.image_size;
  std::vector<Camera> cams;

  const auto ring = [&](double el_jitter_scale, std::mt19937_64* rng) {
    std::uniform_real_distribution<double> jit(-preset.jitter_deg, preset.jitter_deg);
    for (double el : preset.elevations_deg) {
      for (double az : preset.azimuths_deg) {
        double e = el, a = az;
        if (rng) {
          e += el_jitter_scale * jit(*rng);
          a += jit(*rng);
        }
        cams.push_back(make_camera(spherical_eye(d, e, a), {}, fov, size));
      }
    }
    double top_el = 90.0, top_az = 0.0;
    if (rng) {
      top_el = 90.0 - std::abs(jit(*rng));
      top_az = jit(*rng);
    }
    cams.push_back(make_camera(spherical_eye(d, top_el, top_az), {}, fov, size));
  };

  switch (preset.kind) {
    case PresetKind::default9:
      ring(1.0, nullptr);
      break;
    case PresetKind::jittered18: {
      std::mt19937_64 rng(stream_seed(seed, 0x4a17));
      ring(1.0, &rng);
      ring(1.0, &rng);
      break;
    }
    case PresetKind::human24:
      for (double y : preset.y_offsets)
        for (double az : preset.azimuths_deg) {
          const Vec3 ring_pos = spherical_eye(d, 0.0, az);
          cams.push_back(make_camera({ring_pos.x, y, ring_pos.z}, {0, y, 0}, fov, size));
        }
      break;
  }
  return cams;
}

struct ViewAngles {
  double elevation_deg;
  double azimuth_deg;  // in [0, 360)
};

inline ViewAngles view_angles(const Camera& cam) {
  const Vec3 dir = cam.eye - cam.target;
  const double r = norm(dir);
  double az = rad2deg(std::atan2(dir.z, dir.x));
  if (az < 0) az += 360.0;
  return {rad2deg(std::asin(std::clamp(dir.y / r, -1.0, 1.0))), az};
}

/// Prompt augmentation from the camera position relative to its target.
inline std::string prompt_view_suffix(const Camera& cam) {
  const ViewAngles a = view_angles(cam);
  if (a.elevation_deg > 60.0) return "top-view";
  static constexpr std::array<std::pair<double, const char*>, 5> dirs{
      {{0, "front view"}, {90, "side view"}, {180, "rear view"}, {270, "side view"}, {360, "front view"}}};
  const char* best = dirs[0].second;
  double best_d = 1e9;
  for (const auto& [ang, name] : dirs) {
    const double dd = std::abs(a.azimuth_deg - ang);
    if (dd < best_d) {
      best_d = dd;
      best = name;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Texture resolution policy

inline int round_up8(double x) {
  const double q = std::ceil(x / 8.0 - 1e-9);
  return static_cast<int>(std::max(1.0, q)) * 8;
}

struct Coarse {};
struct Refine {
  double old_fov;  // radians
  double new_fov;
};

/// Coarse: base * ceil(sqrt(uv_fraction * area / diameter^2)), rounded up to
/// a multiple of 8 and clamped to [base, 8 * base].
inline std::pair<int, int> texture_resolution(const TriMesh& mesh, Coarse, int base) {
  if (base <= 0 || base % 8 != 0) throw ShapeError("base resolution must be a positive multiple of 8");
  if (!mesh.has_uvs()) throw InvalidMesh("texture_resolution needs a UV'd mesh");
  const double diameter = 2.0 * bounding_radius(mesh);
  const double frac = uv_coverage_fraction(mesh);
  if (!(diameter > 0) || !(frac > 0)) throw InvalidMesh("degenerate mesh or UV layout");
  const double ratio = frac * surface_area(mesh) / (diameter * diameter);
  int side = round_up8(base * std::ceil(std::sqrt(ratio) - 1e-12));
  side = std::clamp(side, base, 8 * base);
  return {side, side};
}

/// Refine: each side grows by tan(old/2) / tan(new/2).
inline std::pair<int, int> texture_resolution(std::pair<int, int> current, Refine r) {
  if (!(r.new_fov < r.old_fov)) throw InvalidRefinement("new FOV must be narrower than the old FOV");
  if (!(r.new_fov > 0) || !(r.old_fov < kPi)) throw InvalidRefinement("FOV outside (0, pi)");
  const double scale = std::tan(r.old_fov / 2) / std::tan(r.new_fov / 2);
  return {round_up8(current.first * scale), round_up8(current.second * scale)};
}

// ---------------------------------------------------------------------------
// OBJ ingestion

namespace detail {
inline int obj_index(const std::string& tok, int count) {
  const int i = std::stoi(tok);
  if (i > 0) return i - 1;
  if (i < 0) return count + i;
  throw InvalidMesh("OBJ index 0 is invalid");
}

inline std::vector<int> chart_labels_from_uv_indices(const std::vector<std::array<int, 3>>& uv_faces,
                                                     std::size_t n_uv) {
  std::vector<int> parent(n_uv);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  for (const auto& f : uv_faces) {
    parent[find(f[1])] = find(f[0]);
    parent[find(f[2])] = find(f[0]);
  }
  std::map<int, int> relabel;
  std::vector<int> out;
  out.reserve(uv_faces.size());
  for (const auto& f : uv_faces) {
    const int root = find(f[0]);
    auto [it, _] = relabel.emplace(root, static_cast<int>(relabel.size()));
    out.push_back(it->second);
  }
  return out;
}
}  // namespace detail

/// Parse `v`, `vt` and `f` records. Polygons are fan-triangulated. If any
/// face lacks texture indices the whole mesh is returned without UVs.
/// Charts are the connected components of faces sharing `vt` indices.
inline TriMesh parse_obj(std::istream& in) {
  TriMesh mesh;
  std::vector<Vec2> uvs;
  std::vector<std::array<int, 3>> uv_faces;
  bool all_have_uv = true;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p.x >> p.y >> p.z)) throw InvalidMesh("malformed v record: " + line);
      mesh.vertices.push_back(p);
    } else if (tag == "vt") {
      Vec2 t;
      if (!(ls >> t.u >> t.v)) throw InvalidMesh("malformed vt record: " + line);
      uvs.push_back(t);
    } else if (tag == "f") {
      std::vector<int> vi, ti;
      std::string tok;
      while (ls >> tok) {
        const auto s1 = tok.find('/');
        vi.push_back(detail::obj_index(tok.substr(0, s1), static_cast<int>(mesh.vertices.size())));
        if (s1 != std::string::npos) {
          const auto s2 = tok.find('/', s1 + 1);
          const std::string t = tok.substr(s1 + 1, s2 == std::string::npos ? std::string::npos : s2 - s1 - 1);
          if (!t.empty()) ti.push_back(detail::obj_index(t, static_cast<int>(uvs.size())));
        }
      }
      if (vi.size() < 3) throw InvalidMesh("face with fewer than 3 vertices");
      if (ti.size() != vi.size()) all_have_uv = false;
      for (std::size_t k = 1; k + 1 < vi.size(); ++k) {
        mesh.faces.push_back({vi[0], vi[k], vi[k + 1]});
        if (ti.size() == vi.size()) uv_faces.push_back({ti[0], ti[k], ti[k + 1]});
      }
    }
  }
  if (all_have_uv && !uv_faces.empty()) {
    for (const auto& f : uv_faces)
      for (int t : f)
        if (t < 0 || t >= static_cast<int>(uvs.size())) throw InvalidMesh("vt index out of range");
    mesh.face_uvs.reserve(uv_faces.size());
    for (const auto& f : uv_faces) mesh.face_uvs.push_back({uvs[f[0]], uvs[f[1]], uvs[f[2]]});
    mesh.chart_ids = detail::chart_labels_from_uv_indices(uv_faces, uvs.size());
  }
  validate_mesh(mesh);
  return mesh;
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_obj(in);
}

inline void write_obj(std::ostream& out, const TriMesh& mesh) {
  out.precision(17);
  for (const auto& v : mesh.vertices) out << "v " << v.x << ' ' << v.y << ' ' << v.z << '\n';
  if (mesh.has_uvs()) {
    for (const auto& t : mesh.face_uvs)
      for (const auto& uv : t) out << "vt " << uv.u << ' ' << uv.v << '\n';
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
      out << 'f';
      for (int k = 0; k < 3; ++k) out << ' ' << mesh.faces[f][k] + 1 << '/' << 3 * f + k + 1;
      out << '\n';
    }
  } else {
    for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
}

// ---------------------------------------------------------------------------
// Preset / camera JSON

NLOHMANN_JSON_SERIALIZE_ENUM(PresetKind, {{PresetKind::default9, "default9"},
                                          {PresetKind::jittered18, "jittered18"},
                                          {PresetKind::human24, "human24"}})

inline void to_json(nlohmann::json& j, const CameraPreset& p) {
  j = {{"kind", p.kind},
       {"distance", p.distance},
       {"azimuths_deg", p.azimuths_deg},
       {"elevations_deg", p.elevations_deg},
       {"y_offsets", p.y_offsets},
       {"jitter_deg", p.jitter_deg},
       {"fov_margin", p.fov_margin},
       {"image_size", p.image_size}};
}

inline void from_json(const nlohmann::json& j, CameraPreset& p) {
  p = CameraPreset{};
  j.at("kind").get_to(p.kind);
  if (p.kind == PresetKind::human24) p.elevations_deg = {0};
  if (j.contains("distance")) j.at("distance").get_to(p.distance);
  if (j.contains("azimuths_deg")) j.at("azimuths_deg").get_to(p.azimuths_deg);
  if (j.contains("elevations_deg")) j.at("elevations_deg").get_to(p.elevations_deg);
  if (j.contains("y_offsets")) j.at("y_offsets").get_to(p.y_offsets);
  if (j.contains("jitter_deg")) j.at("jitter_deg").get_to(p.jitter_deg);
  if (j.contains("fov_margin")) j.at("fov_margin").get_to(p.fov_margin);
  if (j.contains("image_size")) j.at("image_size").get_to(p.image_size);
}

inline void to_json(nlohmann::json& j, const Vec3& v) { j = {v.x, v.y, v.z}; }
inline void from_json(const nlohmann::json& j, Vec3& v) { v = {j.at(0), j.at(1), j.at(2)}; }

inline void to_json(nlohmann::json& j, const Camera& c) {
  j = {{"eye", c.eye}, {"target", c.target}, {"up", c.up}, {"fov_y", c.fov_y},
       {"image_h", c.image_h}, {"image_w", c.image_w}};
}
inline void from_json(const nlohmann::json& j, Camera& c) {
  j.at("eye").get_to(c.eye);
  j.at("target").get_to(c.target);
  j.at("up").get_to(c.up);
  j.at("fov_y").get_to(c.fov_y);
  j.at("image_h").get_to(c.image_h);
  j.at("image_w").get_to(c.image_w);
}

}  // namespace simstex
