#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "simstex/core.hpp"
#include "simstex/geometry.hpp"
#include "simstex/rasterizer.hpp"

namespace simstex {

struct HashGridConfig {
  int levels = 8;
  int n_min = 16;
  int n_max = 512;
  int log2_table = 14;
  int features = 2;
  int hidden = 32;
  bool operator==(const HashGridConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const HashGridConfig& c) {
  j = {{"levels", c.levels}, {"n_min", c.n_min},       {"n_max", c.n_max},
       {"log2_table", c.log2_table}, {"features", c.features}, {"hidden", c.hidden}};
}
inline void from_json(const nlohmann::json& j, HashGridConfig& c) {
  j.at("levels").get_to(c.levels);
  j.at("n_min").get_to(c.n_min);
  j.at("n_max").get_to(c.n_max);
  j.at("log2_table").get_to(c.log2_table);
  j.at("features").get_to(c.features);
  j.at("hidden").get_to(c.hidden);
}

/// Trilinear corners of one query point at every level.
struct HashCorners {
  static constexpr int kCorners = 8;
  std::vector<std::uint32_t> index;  // levels * 8 table rows
  std::vector<double> weight;        // levels * 8
  bool clamped = false;
};

/// Multi-resolution hashed feature grid feeding a two-hidden-layer ReLU MLP
/// with a sigmoid RGB head. All parameters live in one flat vector:
///   [tables | W1 b1 | W2 b2 | W3 b3]
/// with tables laid out level-major, row-major (row = table entry).
template <typename T>
class HashGridField {
 public:
  struct Layout {
    std::size_t tables, w1, b1, w2, b2, w3, b3, total;
  };

  HashGridField() : HashGridField(HashGridConfig{}) {}

  explicit HashGridField(HashGridConfig cfg) : cfg_(cfg) {
    if (cfg.levels < 1 || cfg.features < 1 || cfg.hidden < 1 || cfg.log2_table < 1 || cfg.log2_table > 30)
      throw ShapeError("invalid hash grid configuration");
    if (cfg.n_min < 1 || cfg.n_max < cfg.n_min) throw ShapeError("need 1 <= n_min <= n_max");
    const double growth =
        cfg.levels == 1 ? 1.0 : std::exp((std::log(cfg.n_max) - std::log(cfg.n_min)) / (cfg.levels - 1));
    for (int l = 0; l < cfg.levels; ++l) {
      const int n = static_cast<int>(std::floor(cfg.n_min * std::pow(growth, l) + 1e-9));
      if (!res_.empty() && n <= res_.back()) throw ShapeError("hash grid resolutions must strictly increase");
      res_.push_back(n);
      const double corners = std::pow(n + 1.0, 3);
      dense_.push_back(corners <= static_cast<double>(table_size()));
    }
    const std::size_t in = input_dim(), h = static_cast<std::size_t>(cfg.hidden);
    layout_.tables = 0;
    layout_.w1 = static_cast<std::size_t>(cfg.levels) * table_size() * cfg.features;
    layout_.b1 = layout_.w1 + h * in;
    layout_.w2 = layout_.b1 + h;
    layout_.b2 = layout_.w2 + h * h;
    layout_.w3 = layout_.b2 + h;
    layout_.b3 = layout_.w3 + 3 * h;
    layout_.total = layout_.b3 + 3;
    params_.assign(layout_.total, T{0});
  }

  const HashGridConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  std::size_t table_size() const { return std::size_t{1} << cfg_.log2_table; }
  std::size_t input_dim() const { return static_cast<std::size_t>(cfg_.levels) * cfg_.features; }
  const std::vector<int>& resolutions() const { return res_; }
  bool dense_level(int l) const { return dense_[static_cast<std::size_t>(l)]; }

  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::span<T> tables() { return std::span<T>(params_).subspan(0, layout_.w1); }

  /// instant-NGP style init: tables U(-1e-4, 1e-4), He-uniform hidden
  /// layers, Glorot-uniform head, zero biases.
  void initialize(std::uint64_t seed, double table_scale = 1e-4) {
    std::mt19937_64 rng(seed);
    const auto fill = [&](std::size_t from, std::size_t to, double a) {
      std::uniform_real_distribution<double> u(-a, a);
      for (std::size_t k = from; k < to; ++k) params_[k] = static_cast<T>(u(rng));
    };
    std::fill(params_.begin(), params_.end(), T{0});
    const double in = static_cast<double>(input_dim()), h = cfg_.hidden;
    fill(0, layout_.w1, table_scale);
    fill(layout_.w1, layout_.b1, std::sqrt(6.0 / in));
    fill(layout_.w2, layout_.b2, std::sqrt(6.0 / h));
    fill(layout_.w3, layout_.b3, std::sqrt(6.0 / (h + 3)));
  }

  /// Corner rows and trilinear weights for xyz in [-0.5, 0.5]^3 (clamped).
  HashCorners corners(const Vec3& xyz) const {
    HashCorners hc;
    const int L = cfg_.levels;
    hc.index.resize(static_cast<std::size_t>(L) * 8);
    hc.weight.resize(static_cast<std::size_t>(L) * 8);
    std::array<double, 3> p{xyz.x + 0.5, xyz.y + 0.5, xyz.z + 0.5};
    for (double& v : p) {
      if (!(v >= 0.0 && v <= 1.0)) {
        hc.clamped = true;
        v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
      }
    }
    const std::uint32_t mask = static_cast<std::uint32_t>(table_size() - 1);
    for (int l = 0; l < L; ++l) {
      const int n = res_[static_cast<std::size_t>(l)];
      std::array<std::uint32_t, 3> cell;
      std::array<double, 3> frac;
      for (int a = 0; a < 3; ++a) {
        const double pos = p[a] * n;
        const int c = std::min(static_cast<int>(std::floor(pos)), n - 1);
        cell[a] = static_cast<std::uint32_t>(c);
        frac[a] = pos - c;
      }
      for (int k = 0; k < 8; ++k) {
        const std::uint32_t x = cell[0] + (k & 1), y = cell[1] + ((k >> 1) & 1), z = cell[2] + ((k >> 2) & 1);
        std::uint32_t idx;
        if (dense_[static_cast<std::size_t>(l)]) {
          const std::uint32_t side = static_cast<std::uint32_t>(n) + 1;
          idx = x + side * (y + side * z);
        } else {
          idx = (x * 1u ^ y * 2654435761u ^ z * 805459861u) & mask;
        }
        const double w = ((k & 1) ? frac[0] : 1 - frac[0]) * (((k >> 1) & 1) ? frac[1] : 1 - frac[1]) *
                         (((k >> 2) & 1) ? frac[2] : 1 - frac[2]);
        hc.index[static_cast<std::size_t>(l) * 8 + k] = idx;
        hc.weight[static_cast<std::size_t>(l) * 8 + k] = w;
      }
    }
    return hc;
  }

  std::vector<T> encode(const HashCorners& hc) const {
    const int L = cfg_.levels, F = cfg_.features;
    std::vector<T> feat(input_dim(), T{0});
    for (int l = 0; l < L; ++l) {
      const std::size_t base = static_cast<std::size_t>(l) * table_size();
      for (int k = 0; k < 8; ++k) {
        const std::size_t ck = static_cast<std::size_t>(l) * 8 + k;
        const T w = static_cast<T>(hc.weight[ck]);
        const T* row = &params_[(base + hc.index[ck]) * F];
        for (int f = 0; f < F; ++f) feat[static_cast<std::size_t>(l) * F + f] += w * row[f];
      }
    }
    return feat;
  }

  std::vector<T> hash_encode(const Vec3& xyz) const { return encode(corners(xyz)); }

  /// Intermediate activations of one forward pass.
  struct Activations {
    HashCorners corners;
    std::vector<T> feat, a1, h1, a2, h2;
    std::array<T, 3> rgb;
  };

  Activations forward_cached(const Vec3& xyz) const {
    Activations act;
    act.corners = corners(xyz);
    act.feat = encode(act.corners);
    const std::size_t in = input_dim(), h = static_cast<std::size_t>(cfg_.hidden);
    act.a1.assign(h, T{0});
    act.a2.assign(h, T{0});
    for (std::size_t o = 0; o < h; ++o) {
      T s = params_[layout_.b1 + o];
      const T* w = &params_[layout_.w1 + o * in];
      for (std::size_t i = 0; i < in; ++i) s += w[i] * act.feat[i];
      act.a1[o] = s;
    }
    act.h1 = relu(act.a1);
    for (std::size_t o = 0; o < h; ++o) {
      T s = params_[layout_.b2 + o];
      const T* w = &params_[layout_.w2 + o * h];
      for (std::size_t i = 0; i < h; ++i) s += w[i] * act.h1[i];
      act.a2[o] = s;
    }
    act.h2 = relu(act.a2);
    for (std::size_t o = 0; o < 3; ++o) {
      T s = params_[layout_.b3 + o];
      const T* w = &params_[layout_.w3 + o * h];
      for (std::size_t i = 0; i < h; ++i) s += w[i] * act.h2[i];
      act.rgb[o] = T{1} / (T{1} + std::exp(-s));
    }
    return act;
  }

  std::array<T, 3> forward(const Vec3& xyz) const { return forward_cached(xyz).rgb; }

  /// Accumulate d(loss)/d(params) into `grad` given d(loss)/d(rgb).
  void backward(const Activations& act, const std::array<T, 3>& d_rgb, std::vector<T>& grad) const {
    const std::size_t in = input_dim(), h = static_cast<std::size_t>(cfg_.hidden);
    std::array<T, 3> d_a3;
    for (int o = 0; o < 3; ++o) d_a3[o] = d_rgb[o] * act.rgb[o] * (T{1} - act.rgb[o]);
    std::vector<T> d_h2(h, T{0});
    for (std::size_t o = 0; o < 3; ++o) {
      grad[layout_.b3 + o] += d_a3[o];
      T* gw = &grad[layout_.w3 + o * h];
      const T* w = &params_[layout_.w3 + o * h];
      for (std::size_t i = 0; i < h; ++i) {
        gw[i] += d_a3[o] * act.h2[i];
        d_h2[i] += w[i] * d_a3[o];
      }
    }
    std::vector<T> d_h1(h, T{0});
    for (std::size_t o = 0; o < h; ++o) {
      const T d = act.a2[o] > T{0} ? d_h2[o] : T{0};
      if (d == T{0}) continue;
      grad[layout_.b2 + o] += d;
      T* gw = &grad[layout_.w2 + o * h];
      const T* w = &params_[layout_.w2 + o * h];
      for (std::size_t i = 0; i < h; ++i) {
        gw[i] += d * act.h1[i];
        d_h1[i] += w[i] * d;
      }
    }
    std::vector<T> d_feat(in, T{0});
    for (std::size_t o = 0; o < h; ++o) {
      const T d = act.a1[o] > T{0} ? d_h1[o] : T{0};
      if (d == T{0}) continue;
      grad[layout_.b1 + o] += d;
      T* gw = &grad[layout_.w1 + o * in];
      const T* w = &params_[layout_.w1 + o * in];
      for (std::size_t i = 0; i < in; ++i) {
        gw[i] += d * act.feat[i];
        d_feat[i] += w[i] * d;
      }
    }
    // Scatter into table rows in level/corner order.
    const int F = cfg_.features;
    for (int l = 0; l < cfg_.levels; ++l) {
      const std::size_t base = static_cast<std::size_t>(l) * table_size();
      for (int k = 0; k < 8; ++k) {
        const std::size_t ck = static_cast<std::size_t>(l) * 8 + k;
        const T w = static_cast<T>(act.corners.weight[ck]);
        T* row = &grad[(base + act.corners.index[ck]) * F];
        for (int f = 0; f < F; ++f) row[f] += w * d_feat[static_cast<std::size_t>(l) * F + f];
      }
    }
  }

 private:
  static std::vector<T> relu(const std::vector<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
    return out;
  }

  HashGridConfig cfg_;
  std::vector<int> res_;
  std::vector<bool> dense_;
  Layout layout_{};
  std::vector<T> params_;
};

using ColorField = HashGridField<float>;

struct DistillSample {
  Vec3 xyz;
  std::array<float, 3> rgb;
  int view_id = 0;
};

/// Mean squared error over the batch and the three channels, and its
/// gradient with respect to every parameter.
template <typename T>
T loss_and_grad(const HashGridField<T>& field, std::span<const DistillSample> batch, std::vector<T>& grad) {
  grad.assign(field.params().size(), T{0});
  if (batch.empty()) return T{0};
  const T scale = T{1} / static_cast<T>(3 * batch.size());
  T loss{0};
  for (const auto& s : batch) {
    const auto act = field.forward_cached(s.xyz);
    std::array<T, 3> d;
    for (int c = 0; c < 3; ++c) {
      const T diff = act.rgb[c] - static_cast<T>(s.rgb[c]);
      loss += diff * diff * scale;
      d[c] = T{2} * diff * scale;
    }
    field.backward(act, d, grad);
  }
  return loss;
}

template <typename T>
T batch_loss(const HashGridField<T>& field, std::span<const DistillSample> batch) {
  T loss{0};
  for (const auto& s : batch) {
    const auto rgb = field.forward(s.xyz);
    for (int c = 0; c < 3; ++c) {
      const T diff = rgb[c] - static_cast<T>(s.rgb[c]);
      loss += diff * diff;
    }
  }
  return batch.empty() ? T{0} : loss / static_cast<T>(3 * batch.size());
}

struct DistillConfig {
  int iters = 100;
  double lr = 0.01;
  std::size_t batch = 4096;  // full batch when >= the sample count
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
  std::uint64_t seed = 0;
};

/// Adam on the L2 distillation loss. Returns the per-iteration loss.
template <typename T>
std::vector<double> distill(std::span<const DistillSample> samples, HashGridField<T>& field, const DistillConfig& cfg) {
  if (samples.empty()) throw ShapeError("distill needs at least one sample");
  auto& p = field.params();
  std::vector<T> m(p.size(), T{0}), v(p.size(), T{0}), grad;
  std::vector<DistillSample> batch;
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(cfg.iters));
  const bool full = cfg.batch >= samples.size();
  double b1t = 1, b2t = 1;
  for (int it = 0; it < cfg.iters; ++it) {
    std::span<const DistillSample> view = samples;
    if (!full) {
      std::mt19937_64 rng(stream_seed(cfg.seed, it));
      std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
      batch.resize(cfg.batch);
      for (auto& s : batch) s = samples[pick(rng)];
      view = batch;
    }
    const T loss = loss_and_grad(field, view, grad);
    if (!std::isfinite(static_cast<double>(loss))) throw NumericalError("non-finite distillation loss");
    history.push_back(static_cast<double>(loss));
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    const double step = cfg.lr * std::sqrt(1 - b2t) / (1 - b1t);
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = static_cast<T>(cfg.beta1 * m[k] + (1 - cfg.beta1) * grad[k]);
      v[k] = static_cast<T>(cfg.beta2 * v[k] + (1 - cfg.beta2) * grad[k] * grad[k]);
      p[k] -= static_cast<T>(step * m[k] / (std::sqrt(static_cast<double>(v[k])) + cfg.eps));
    }
  }
  return history;
}

/// Foreground pixels of a view as distillation samples. `rgb` must match the
/// raster's image size and carry at least three channels.
inline std::vector<DistillSample> samples_from_view(const RasterOutput& raster, const Grid<float>& rgb, int view_id) {
  if (rgb.height() != raster.height || rgb.width() != raster.width || rgb.channels() < 3)
    throw ShapeError("RGB view does not match the raster");
  std::vector<DistillSample> out;
  for (std::size_t i = 0; i < raster.pixels(); ++i) {
    if (!raster.foreground(i)) continue;
    const auto px = rgb.pixel(i);
    out.push_back({raster.xyz[i], {px[0], px[1], px[2]}, view_id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Texture bake

/// Fill texels with no value from the mean of their valid 8-neighbors, one
/// ring per pass, until every texel is valid. No-op when nothing is valid.
inline void dilate(Grid<float>& tex, std::vector<std::uint8_t>& valid) {
  const int h = tex.height(), w = tex.width(), c = tex.channels();
  if (std::none_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; })) return;
  while (std::any_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v == 0; })) {
    Grid<float> next = tex;
    std::vector<std::uint8_t> next_valid = valid;
    for (int r = 0; r < h; ++r)
      for (int col = 0; col < w; ++col) {
        const std::size_t i = static_cast<std::size_t>(r) * w + col;
        if (valid[i]) continue;
        std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
        int n = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = col + dc;
            if ((dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
            const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
            if (!valid[j]) continue;
            const auto px = tex.pixel(j);
            for (int k = 0; k < c; ++k) acc[k] += px[k];
            ++n;
          }
        if (n == 0) continue;
        auto dst = next.pixel(i);
        for (int k = 0; k < c; ++k) dst[k] = static_cast<float>(acc[k] / n);
        next_valid[i] = 1;
      }
    tex = std::move(next);
    valid = std::move(next_valid);
  }
}

/// Query the field at the surface point of every texel center that lies in a
/// UV chart (lowest face id wins on shared edges), then dilate into the
/// gutters.
template <typename T>
LatentTexture bake_texture(const HashGridField<T>& field, const TriMesh& mesh, int tex_h, int tex_w) {
  if (!mesh.has_uvs()) throw InvalidMesh("bake_texture needs a UV'd mesh");
  LatentTexture tex(tex_h, tex_w, 3, 0.0f);
  std::vector<std::uint8_t> valid(tex.pixels(), 0);
  for_each_uv_texel(mesh, tex_h, tex_w, [&](int f, int r, int c, const std::array<double, 3>& b) {
    const std::size_t i = static_cast<std::size_t>(r) * tex_w + c;
    if (valid[i]) return;
    const auto& face = mesh.faces[static_cast<std::size_t>(f)];
    const Vec3 p = mesh.vertices[face[0]] * b[0] + mesh.vertices[face[1]] * b[1] + mesh.vertices[face[2]] * b[2];
    const auto rgb = field.forward(p);
    auto dst = tex.pixel(i);
    for (int k = 0; k < 3; ++k) dst[k] = static_cast<float>(rgb[k]);
    valid[i] = 1;
  });
  dilate(tex, valid);
  return tex;
}

// ---------------------------------------------------------------------------
// Checkpoint: "HGF1", u32 LE JSON length, JSON hyperparameters, float32 params.

inline void save_field(const std::string& path, const ColorField& field) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  nlohmann::json hp = field.config();
  hp["param_count"] = field.params().size();
  const std::string text = hp.dump();
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  out.write("HGF1", 4);
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(field.params().data()),
            static_cast<std::streamsize>(field.params().size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path);
}

inline ColorField load_field(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  std::uint32_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in || std::string(magic, 4) != "HGF1") throw IoError(path + " is not an HGF1 checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), len);
  const auto hp = nlohmann::json::parse(text);
  ColorField field(hp.get<HashGridConfig>());
  if (hp.value("param_count", std::size_t{0}) != field.params().size())
    throw IoError(path + ": parameter count does not match hyperparameters");
  in.read(reinterpret_cast<char*>(field.params().data()),
          static_cast<std::streamsize>(field.params().size() * sizeof(float)));
  if (!in) throw IoError(path + ": truncated parameters");
  return field;
}

}  // namespace simstex
