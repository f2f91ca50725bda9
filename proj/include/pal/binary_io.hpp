#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "pal/error.hpp"

namespace pal::io {

// Little-endian primitives. Encoded byte-by-byte so the formats are
// unambiguous regardless of host endianness.

inline void write_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void write_i32(std::ostream& os, std::int32_t v) {
  write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f32(std::ostream& os, float v) {
  write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline bool read_u8(std::istream& is, std::uint8_t& v) {
  int c = is.get();
  if (c == std::char_traits<char>::eof()) return false;
  v = static_cast<std::uint8_t>(c);
  return true;
}

inline bool read_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

inline bool read_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

inline bool read_i32(std::istream& is, std::int32_t& v) {
  std::uint32_t u = 0;
  if (!read_u32(is, u)) return false;
  v = std::bit_cast<std::int32_t>(u);
  return true;
}

inline bool read_f32(std::istream& is, float& v) {
  std::uint32_t u = 0;
  if (!read_u32(is, u)) return false;
  v = std::bit_cast<float>(u);
  return true;
}

inline bool read_f64(std::istream& is, double& v) {
  std::uint64_t u = 0;
  if (!read_u64(is, u)) return false;
  v = std::bit_cast<double>(u);
  return true;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return is;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char buf[4] = {};
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
    throw FormatError(what + ": bad magic bytes (expected " + std::string(magic, 4) + ")");
}

}  // namespace pal::io
