#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "steerlab/error.hpp"

// Little-endian IEEE-754 binary32 payload files and whole-file text helpers.
namespace steerlab::io {

namespace fs = std::filesystem;

inline std::uint32_t to_little_endian(std::uint32_t bits) {
  if constexpr (std::endian::native == std::endian::little) {
    return bits;
  } else {
    return ((bits & 0xffu) << 24) | ((bits & 0xff00u) << 8) | ((bits & 0xff0000u) >> 8) | (bits >> 24);
  }
}

inline void append_f32(std::vector<unsigned char>& out, float value) {
  const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(value));
  out.push_back(static_cast<unsigned char>(bits & 0xffu));
  out.push_back(static_cast<unsigned char>((bits >> 8) & 0xffu));
  out.push_back(static_cast<unsigned char>((bits >> 16) & 0xffu));
  out.push_back(static_cast<unsigned char>((bits >> 24) & 0xffu));
}

inline float read_f32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("short read on " + path.string());
  }
  return bytes;
}

inline void write_bytes(const fs::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed on " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed on " + path.string());
}

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

}  // namespace steerlab::io
