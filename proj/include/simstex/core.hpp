#pragma once

// Shared value types: error hierarchy, small vector math, dense H x W x C grids
// and the seeded RNG streams every stochastic stage draws from.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace simstex {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SIMSTEX_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

SIMSTEX_DEFINE_ERROR(InvalidMesh);
SIMSTEX_DEFINE_ERROR(AtlasOverflow);
SIMSTEX_DEFINE_ERROR(InvalidRefinement);
SIMSTEX_DEFINE_ERROR(ShapeError);
SIMSTEX_DEFINE_ERROR(ScheduleError);
SIMSTEX_DEFINE_ERROR(GuidanceError);
SIMSTEX_DEFINE_ERROR(OracleError);
SIMSTEX_DEFINE_ERROR(TransportError);
SIMSTEX_DEFINE_ERROR(ProtocolError);
SIMSTEX_DEFINE_ERROR(NumericalError);
SIMSTEX_DEFINE_ERROR(IoError);

#undef SIMSTEX_DEFINE_ERROR

inline constexpr double kPi = 3.14159265358979323846;

constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

struct Vec3 {
  double x = 0, y = 0, z = 0;

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  constexpr Vec3 operator-() const { return {-x, -y, -z}; }
  constexpr bool operator==(const Vec3&) const = default;
  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return a / norm(a); }

struct Vec2 {
  double u = 0, v = 0;
  constexpr bool operator==(const Vec2&) const = default;
};

/// Dense row-major, channel-last grid. Used for latent textures (H x W x C),
/// latent images (h x w x C) and single-channel buffers (C = 1).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, int channels, T fill = T{})
      : h_(height), w_(width), c_(channels) {
    if (height < 0 || width < 0 || channels < 0) throw ShapeError("negative grid dimension");
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  std::size_t pixels() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Grid& o) const { return h_ == o.h_ && w_ == o.w_ && c_ == o.c_; }

  T& at(int row, int col, int ch = 0) { return data_[index(row, col, ch)]; }
  const T& at(int row, int col, int ch = 0) const { return data_[index(row, col, ch)]; }

  /// Channel slice of a pixel addressed by its flat index row * W + col.
  std::span<T> pixel(std::size_t flat) { return {data_.data() + flat * c_, static_cast<std::size_t>(c_)}; }
  std::span<const T> pixel(std::size_t flat) const {
    return {data_.data() + flat * c_, static_cast<std::size_t>(c_)};
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  bool operator==(const Grid&) const = default;

 private:
  std::size_t index(int row, int col, int ch) const {
    return (static_cast<std::size_t>(row) * w_ + col) * c_ + ch;
  }

  int h_ = 0, w_ = 0, c_ = 0;
  std::vector<T> data_;
};

using LatentTexture = Grid<float>;
using LatentImage = Grid<float>;
using ScalarGrid = Grid<float>;

inline void require_same_shape(const Grid<float>& a, const Grid<float>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derive a stream seed from a base seed and a tuple of stream coordinates,
/// e.g. (purpose, step, view). Distinct coordinates give unrelated streams.
template <typename... Ints>
constexpr std::uint64_t stream_seed(std::uint64_t base, Ints... coords) {
  std::uint64_t s = mix64(base);
  ((s = mix64(s ^ (static_cast<std::uint64_t>(coords) + 0x632be59bd9b4e019ULL))), ...);
  return s;
}

/// Gaussian sample source over one seeded stream.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

  float next() { return static_cast<float>(dist_(engine_)); }
  void fill(std::span<float> out) {
    for (float& v : out) v = next();
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

inline Grid<float> normal_grid(int h, int w, int c, std::uint64_t seed) {
  Grid<float> g(h, w, c);
  NormalStream(seed).fill(g.values());
  return g;
}

}  // namespace simstex
