#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mtret {

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

inline void write_text_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out << data;
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Calls `fn` for every non-empty line, parsed as one JSON object.
inline void for_each_jsonl(const std::string& path,
                           const std::function<void(const nlohmann::json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": malformed record");
    }
    fn(j);
  }
}

// FNV-1a over the file bytes; stable across runs, used to pin an index build
// to the checkpoint it came from.
inline std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 15];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

inline std::string hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

static_assert(std::endian::native == std::endian::little,
              "raw blobs are written little-endian; big-endian hosts need a "
              "byte swap here");

inline void write_doubles(std::ofstream& out, const double* data,
                          std::size_t count) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, double* data, std::size_t count) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("blob truncated");
}

inline void write_i64s(std::ofstream& out, const std::int64_t* data,
                       std::size_t count) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(std::int64_t)));
}

inline void read_i64s(std::ifstream& in, std::int64_t* data, std::size_t count) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(count * sizeof(std::int64_t)));
  if (!in) throw std::runtime_error("blob truncated");
}

}  // namespace mtret
