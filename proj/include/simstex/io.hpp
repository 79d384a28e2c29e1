#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "simstex/core.hpp"

namespace simstex {

// .ltx: "LTX1", u32 LE H, W, C, then H*W*C float32 LE, row-major, channel-last.

inline std::vector<std::uint8_t> encode_ltx(const Grid<float>& g) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + g.size() * 4);
  out.insert(out.end(), {'L', 'T', 'X', '1'});
  for (std::uint32_t v : {static_cast<std::uint32_t>(g.height()), static_cast<std::uint32_t>(g.width()),
                          static_cast<std::uint32_t>(g.channels())})
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(g.raw().data());
  out.insert(out.end(), bytes, bytes + g.size() * 4);
  return out;
}

inline Grid<float> decode_ltx(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 16 || std::memcmp(buf.data(), "LTX1", 4) != 0) throw IoError("not an LTX1 container");
  const auto u32 = [&](std::size_t off) {
    return static_cast<std::uint32_t>(buf[off]) | static_cast<std::uint32_t>(buf[off + 1]) << 8 |
           static_cast<std::uint32_t>(buf[off + 2]) << 16 | static_cast<std::uint32_t>(buf[off + 3]) << 24;
  };
  const std::uint64_t h = u32(4), w = u32(8), c = u32(12);
  if (std::max({h, w, c}) > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
    throw IoError("LTX1 dimensions out of range");
  // Division keeps hostile headers from overflowing the size product.
  const std::uint64_t payload = buf.size() - 16, elems = payload / 4;
  const bool ok = payload % 4 == 0 && (h == 0 || w == 0 || c == 0 ? elems == 0
                                                                   : elems % h == 0 && (elems / h) % w == 0 &&
                                                                         elems / h / w == c);
  if (!ok) throw IoError("LTX1 payload size does not match header");
  Grid<float> g(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  std::memcpy(g.raw().data(), buf.data() + 16, g.size() * 4);
  return g;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline void save_ltx(const std::string& path, const Grid<float>& g) { write_file(path, encode_ltx(g)); }
inline Grid<float> load_ltx(const std::string& path) { return decode_ltx(read_file(path)); }

// PFM, little-endian (scale -1). Rows are stored bottom to top.

inline void save_pfm(const std::string& path, const Grid<float>& g) {
  if (g.channels() != 1 && g.channels() != 3) throw IoError("PFM holds 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (g.channels() == 3 ? "PF" : "Pf") << '\n' << g.width() << ' ' << g.height() << "\n-1.0\n";
  const std::size_t row = static_cast<std::size_t>(g.width()) * g.channels();
  for (int r = g.height() - 1; r >= 0; --r)
    out.write(reinterpret_cast<const char*>(g.raw().data() + r * row), static_cast<std::streamsize>(row * 4));
  if (!out) throw IoError("write failed: " + path);
}

inline Grid<float> load_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  in >> magic >> w >> h >> scale;
  in.get();
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0) throw IoError(path + " is not a PFM file");
  if (scale > 0) throw IoError(path + ": big-endian PFM is not supported");
  Grid<float> g(h, w, magic == "PF" ? 3 : 1);
  const std::size_t row = static_cast<std::size_t>(w) * g.channels();
  for (int r = h - 1; r >= 0; --r)
    in.read(reinterpret_cast<char*>(g.raw().data() + r * row), static_cast<std::streamsize>(row * 4));
  if (!in) throw IoError(path + ": truncated PFM data");
  return g;
}

/// Load .ltx or .pfm by extension.
inline Grid<float> load_grid(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".pfm") return load_pfm(path);
  return load_ltx(path);
}

// 8-bit PNG. Values in [0,1] are written as round(255 * v) with no transfer
// function applied.

struct Rgb8Image {
  int height = 0, width = 0, channels = 3;
  std::vector<std::uint8_t> data;
};

inline std::uint8_t to_u8(float v) {
  if (!(v > 0.0f)) return 0;
  if (v >= 1.0f) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0f));
}

inline Rgb8Image to_rgb8(const Grid<float>& g) {
  if (g.channels() != 1 && g.channels() != 3) throw IoError("PNG export needs 1 or 3 channels");
  Rgb8Image img{g.height(), g.width(), 3, {}};
  img.data.resize(g.pixels() * 3);
  for (std::size_t i = 0; i < g.pixels(); ++i)
    for (int c = 0; c < 3; ++c) img.data[i * 3 + c] = to_u8(g.raw()[i * g.channels() + (g.channels() == 3 ? c : 0)]);
  return img;
}

inline void save_png(const std::string& path, const Rgb8Image& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < img.height; ++r)
    png_write_row(png, const_cast<png_bytep>(img.data.data() + static_cast<std::size_t>(r) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void save_png(const std::string& path, const Grid<float>& g) { save_png(path, to_rgb8(g)); }

inline Rgb8Image load_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw IoError("cannot read PNG " + path);
  image.format = PNG_FORMAT_RGB;
  Rgb8Image img{static_cast<int>(image.height), static_cast<int>(image.width), 3, {}};
  img.data.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.data.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path);
  }
  return img;
}

}  // namespace simstex
