#pragma once

// Little-endian raw arrays, round-trip number formatting and tiny CSV helpers.

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "emore/core.hpp"

namespace emore::io {

namespace fs = std::filesystem;

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf" || s == "exact") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{}) throw IoError("cannot parse number '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{}) throw IoError("cannot parse integer '" + std::string(s) + "'");
  return v;
}

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

inline std::ofstream open_out(const fs::path& p, bool binary = false) {
  std::ofstream f(p, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  return f;
}

inline std::ifstream open_in(const fs::path& p, bool binary = false) {
  std::ifstream f(p, binary ? std::ios::binary : std::ios::in);
  if (!f) throw IoError("cannot open '" + p.string() + "'");
  return f;
}

inline std::vector<char> read_bytes(const fs::path& p) {
  auto f = open_in(p, true);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename T, typename Src>
void write_raw(const fs::path& p, std::span<const Src> values) {
  auto f = open_out(p, true);
  for (const Src& v : values) {
    const T le = to_little_endian(static_cast<T>(v));
    f.write(reinterpret_cast<const char*>(&le), sizeof le);
  }
  if (!f) throw IoError("write failed for '" + p.string() + "'");
}

template <typename T>
std::vector<T> read_raw(const fs::path& p) {
  const auto bytes = read_bytes(p);
  if (bytes.size() % sizeof(T) != 0) throw IoError("'" + p.string() + "' has a truncated record");
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v;
    std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
    out[i] = to_little_endian(v);
  }
  return out;
}

/// Interleaved (re, im) float32 pairs.
inline void write_complex64(const fs::path& p, std::span<const cplx> values) {
  std::vector<float> flat;
  flat.reserve(values.size() * 2);
  for (const cplx& v : values) {
    flat.push_back(static_cast<float>(v.real()));
    flat.push_back(static_cast<float>(v.imag()));
  }
  write_raw<float, float>(p, flat);
}

inline std::vector<cplx> read_complex64(const fs::path& p) {
  const auto flat = read_raw<float>(p);
  if (flat.size() % 2 != 0) throw IoError("'" + p.string() + "' is not a complex64 array");
  std::vector<cplx> out(flat.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {flat[2 * i], flat[2 * i + 1]};
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

/// Header row plus data rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw IoError("CSV column '" + std::string(name) + "' missing");
  }
};

inline CsvTable read_csv(const fs::path& p) {
  auto f = open_in(p);
  CsvTable t;
  std::string line;
  if (!std::getline(f, line)) throw IoError("'" + p.string() + "' is empty");
  t.header = split_csv_line(line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split_csv_line(line));
    if (t.rows.back().size() != t.header.size()) throw IoError("ragged CSV row in '" + p.string() + "'");
  }
  return t;
}

}  // namespace emore::io
