#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cmalign/error.hpp"
#include "cmalign/tensor.hpp"

namespace cmalign {

// CMFT tensor dump: magic "CMFT", u32-LE rank, u32-LE dims, then f32-LE
// values in row-major order. The in-memory type is double, so a round trip
// projects values to their nearest f32; re-dumping loaded data reproduces
// the file byte for byte.

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

}  // namespace detail

inline std::string encode_cmft(const Tensor& t) {
  std::string out;
  out.reserve(8 + 4 * static_cast<size_t>(t.rank() + t.size()));
  out += "CMFT";
  detail::put_u32_le(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) detail::put_u32_le(out, static_cast<uint32_t>(t.dim(i)));
  for (int64_t i = 0; i < t.size(); ++i) {
    float f = static_cast<float>(t[i]);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32_le(out, bits);
  }
  return out;
}

inline Tensor decode_cmft(const std::string& bytes, const std::string& origin) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= 8 && std::memcmp(p, "CMFT", 4) == 0, ErrorKind::io,
          origin, ": not a CMFT tensor file");
  uint32_t rank = detail::get_u32_le(p + 4);
  require(rank >= 1 && rank <= 8, ErrorKind::io, origin, ": unsupported rank ", rank);
  require(bytes.size() >= 8 + 4ull * rank, ErrorKind::io, origin, ": truncated header");
  Shape shape;
  int64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = detail::get_u32_le(p + 8 + 4 * i);
    require(d >= 1, ErrorKind::io, origin, ": zero dimension");
    shape.push_back(static_cast<int>(d));
    count *= d;
  }
  size_t expect = 8 + 4ull * rank + 4ull * static_cast<size_t>(count);
  require(bytes.size() == expect, ErrorKind::io, origin, ": size ", bytes.size(), " != expected ", expect);
  Tensor t(shape);
  const unsigned char* v = p + 8 + 4 * rank;
  for (int64_t i = 0; i < count; ++i) {
    uint32_t bits = detail::get_u32_le(v + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    t[i] = static_cast<double>(f);
  }
  return t;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::io, "cannot open for writing: ", path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorKind::io, "write failed: ", path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::io, "cannot open: ", path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(!f.bad(), ErrorKind::io, "read failed: ", path.string());
  return bytes;
}

inline void write_cmft(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, encode_cmft(t));
}

inline Tensor read_cmft(const std::filesystem::path& path) {
  return decode_cmft(read_file(path), path.string());
}

// Binary PGM (P5), values min-max scaled to 8 bits. Inspection output only.
inline void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  require(map.rank() == 2, ErrorKind::dimension, "PGM export needs a rank-2 map, got ", shape_str(map.shape()));
  int h = map.dim(0);
  int w = map.dim(1);
  double lo = map[0], hi = map[0];
  for (int64_t i = 0; i < map.size(); ++i) {
    lo = std::min(lo, map[i]);
    hi = std::max(hi, map[i]);
  }
  double range = hi - lo;
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int64_t i = 0; i < map.size(); ++i) {
    double v = range > 0 ? (map[i] - lo) / range : 0.0;
    int byte = static_cast<int>(std::lround(v * 255.0));
    out.push_back(static_cast<char>(byte < 0 ? 0 : (byte > 255 ? 255 : byte)));
  }
  write_file(path, out);
}

}  // namespace cmalign
