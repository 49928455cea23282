#pragma once

/// Binary netpbm I/O: P6 (PPM, RGB) for images and P5 (PGM, grayscale) for
/// masks and rate-map exports. maxval is fixed at 255 and anything else is
/// rejected. Images map to float tensors in [0, 1] (v = byte / 255); masks
/// must contain only 0 and 255.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

namespace detail {

inline int pnm_token(std::istream& is) {
  // skips whitespace and '#' comments, returns a non-negative integer
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (std::isspace(c)) {
      c = is.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw io_error("malformed netpbm header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  if (c == EOF || !std::isspace(c)) throw io_error("malformed netpbm header");
  return v;
}

}  // namespace detail

/// image: (1, 3, H, W), values in [0, 1]; quantized as round(v * 255).
inline void write_ppm(const std::string& path, const Tensor<float>& image) {
  Shape s = image.shape();
  require(s.n == 1 && s.c == 3, "write_ppm: expected (1,3,H,W), got " + s.str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  char head[64];
  std::snprintf(head, sizeof(head), "P6\n%lld %lld\n255\n", (long long)s.w, (long long)s.h);
  os << head;
  std::vector<unsigned char> row(std::size_t(s.w) * 3);
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        float v = image.at(0, c, y, x);
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        row[std::size_t(x) * 3 + std::size_t(c)] = (unsigned char)(v * 255.0f + 0.5f);
      }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw io_error("write failed: " + path);
}

inline Tensor<float> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  char m0 = char(is.get()), m1 = char(is.get());
  if (m0 != 'P' || m1 != '6') throw io_error("not a binary PPM (P6): " + path);
  const int w = detail::pnm_token(is);
  const int h = detail::pnm_token(is);
  const int maxval = detail::pnm_token(is);
  if (maxval != 255) throw io_error("unsupported maxval " + std::to_string(maxval) + " in " + path);
  Tensor<float> image = Tensor<float>::zeros(Shape{1, 3, h, w});
  std::vector<unsigned char> row(std::size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
    if (!is) throw io_error("truncated PPM: " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        image.at(0, c, y, x) = float(row[std::size_t(x) * 3 + std::size_t(c)]) / 255.0f;
  }
  return image;
}

/// mask: (1, 1, H, W) with values exactly 0 or 1; stored as 0 / 255.
inline void write_pgm_mask(const std::string& path, const Tensor<float>& mask) {
  Shape s = mask.shape();
  require(s.n == 1 && s.c == 1, "write_pgm_mask: expected (1,1,H,W), got " + s.str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  char head[64];
  std::snprintf(head, sizeof(head), "P5\n%lld %lld\n255\n", (long long)s.w, (long long)s.h);
  os << head;
  std::vector<unsigned char> row(std::size_t(s.w));
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      float v = mask.at(0, 0, y, x);
      if (v != 0.f && v != 1.f) throw io_error("write_pgm_mask: non-binary mask value");
      row[std::size_t(x)] = v == 1.f ? 255 : 0;
    }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw io_error("write failed: " + path);
}

inline Tensor<float> read_pgm_mask(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  char m0 = char(is.get()), m1 = char(is.get());
  if (m0 != 'P' || m1 != '5') throw io_error("not a binary PGM (P5): " + path);
  const int w = detail::pnm_token(is);
  const int h = detail::pnm_token(is);
  const int maxval = detail::pnm_token(is);
  if (maxval != 255) throw io_error("unsupported maxval " + std::to_string(maxval) + " in " + path);
  Tensor<float> mask = Tensor<float>::zeros(Shape{1, 1, h, w});
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
    if (!is) throw io_error("truncated PGM: " + path);
    for (int x = 0; x < w; ++x) {
      const unsigned char v = row[std::size_t(x)];
      if (v != 0 && v != 255)
        throw io_error("mask PGM contains value " + std::to_string(int(v)) +
                       " (must be 0 or 255): " + path);
      mask.at(0, 0, y, x) = v == 255 ? 1.f : 0.f;
    }
  }
  return mask;
}

/// Grayscale export for rate maps: min-max normalized to [0, 255].
inline void write_pgm_gray(const std::string& path, const Tensor<float>& plane,
                           float lo, float hi) {
  Shape s = plane.shape();
  require(s.n == 1 && s.c == 1, "write_pgm_gray: expected (1,1,H,W)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  char head[64];
  std::snprintf(head, sizeof(head), "P5\n%lld %lld\n255\n", (long long)s.w, (long long)s.h);
  os << head;
  const float span = hi > lo ? hi - lo : 1.0f;
  std::vector<unsigned char> row(std::size_t(s.w));
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      float v = (plane.at(0, 0, y, x) - lo) / span;
      v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
      row[std::size_t(x)] = (unsigned char)(v * 255.0f + 0.5f);
    }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw io_error("write failed: " + path);
}

}  // namespace cseg
