#pragma once

/// Checkpoint container. Byte layout, all integers little-endian:
///   magic "CSEG1"
///   u32   tensor count
///   per tensor, ordered lexicographically by name:
///     u16  name length, then the UTF-8 name bytes
///     u8   dtype code (0 = f32, 1 = f64)
///     u8   rank
///     u32  dims[rank]
///     raw element bytes (little-endian IEEE)
///
/// Network and optimizer tensors are stored as f32 with rank 4; the trainer's
/// scalar metadata rides along as a small f64 tensor.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cseg/tensor.hpp"

namespace cseg {

struct CkptTensor {
  std::vector<std::uint32_t> dims;
  int dtype = 0;  // 0 = f32, 1 = f64
  std::vector<float> f32;
  std::vector<double> f64;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  static CkptTensor from(const Tensor<float>& t) {
    CkptTensor c;
    Shape s = t.shape();
    c.dims = {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.h), std::uint32_t(s.w)};
    c.f32.assign(t.data(), t.data() + t.numel());
    return c;
  }

  static CkptTensor meta(std::vector<double> values) {
    CkptTensor c;
    c.dtype = 1;
    c.dims = {std::uint32_t(values.size())};
    c.f64 = std::move(values);
    return c;
  }
};

using Checkpoint = std::map<std::string, CkptTensor>;  // map iteration = name order

namespace detail {

template <class V>
void put_le(std::ofstream& os, V v) {
  unsigned char buf[sizeof(V)];
  for (std::size_t i = 0; i < sizeof(V); ++i) buf[i] = (unsigned char)((std::uint64_t(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(V));
}

template <class V>
V get_le(std::ifstream& is) {
  unsigned char buf[sizeof(V)];
  is.read(reinterpret_cast<char*>(buf), sizeof(V));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(V); ++i) v |= std::uint64_t(buf[i]) << (8 * i);
  return V(v);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open checkpoint for writing: " + path);
  os.write("CSEG1", 5);
  detail::put_le<std::uint32_t>(os, std::uint32_t(ckpt.size()));
  for (const auto& [name, t] : ckpt) {
    if (name.size() > 0xffff) throw io_error("checkpoint tensor name too long");
    detail::put_le<std::uint16_t>(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(t.dtype));
    os.put(char(t.dims.size()));
    for (auto d : t.dims) detail::put_le<std::uint32_t>(os, d);
    if (t.dtype == 0) {
      if (t.f32.size() != t.count()) throw io_error("checkpoint tensor '" + name + "': dim/data mismatch");
      // IEEE-754 little-endian floats, byte by byte
      for (float v : t.f32) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_le<std::uint32_t>(os, bits);
      }
    } else {
      if (t.f64.size() != t.count()) throw io_error("checkpoint tensor '" + name + "': dim/data mismatch");
      for (double v : t.f64) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        detail::put_le<std::uint64_t>(os, bits);
      }
    }
  }
  if (!os) throw io_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "CSEG1")
    throw io_error("not a CSEG1 checkpoint: " + path);
  const std::uint32_t count = detail::get_le<std::uint32_t>(is);
  Checkpoint ckpt;
  std::string prev;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t nlen = detail::get_le<std::uint16_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const int dtype = is.get();
    const int rank = is.get();
    if (!is || rank < 1 || rank > 4 || (dtype != 0 && dtype != 1))
      throw io_error("corrupt checkpoint header in " + path);
    if (i > 0 && !(prev < name))
      throw io_error("checkpoint tensors not in lexicographic order: " + path);
    prev = name;
    CkptTensor t;
    t.dtype = dtype;
    for (int d = 0; d < rank; ++d) t.dims.push_back(detail::get_le<std::uint32_t>(is));
    const std::uint64_t n = t.count();
    if (dtype == 0) {
      t.f32.resize(n);
      for (auto& v : t.f32) {
        std::uint32_t bits = detail::get_le<std::uint32_t>(is);
        std::memcpy(&v, &bits, 4);
      }
    } else {
      t.f64.resize(n);
      for (auto& v : t.f64) {
        std::uint64_t bits = detail::get_le<std::uint64_t>(is);
        std::memcpy(&v, &bits, 8);
      }
    }
    if (!is) throw io_error("truncated checkpoint: " + path);
    ckpt.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

/// Copies checkpoint data into an existing tensor; shapes must match.
inline void load_into(const CkptTensor& src, Tensor<float>& dst, const std::string& name) {
  if (src.dtype != 0) throw io_error("tensor '" + name + "' is not f32");
  if (std::int64_t(src.count()) != dst.numel())
    throw io_error("tensor '" + name + "' size mismatch");
  std::copy(src.f32.begin(), src.f32.end(), dst.data());
}

}  // namespace cseg
