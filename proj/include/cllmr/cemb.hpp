#pragma once

// "CEMB" tensor files.
//
//   bytes 0-3  magic "CEMB"
//   byte  4    version: 1 = float32 payload, 2 = float64 payload
//   u32 LE     record count
//   u32 LE     dim
//   per record: u32 LE id, then dim little-endian IEEE-754 values
//
// Version 1 is the interchange format for text embeddings, conditioners and
// encoded side tables. Version 2 is used inside checkpoints, where tensors must
// round-trip bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace cllmr::cemb {

namespace fs = std::filesystem;

enum class Precision : std::uint8_t { f32 = 1, f64 = 2 };

struct Table {
  std::vector<std::uint32_t> ids;
  Matrix values;  // ids.size() x dim
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) buf.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) buf.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int k = bytes - 1; k >= 0; --k) v = (v << 8) | p[k];
  return v;
}

}  // namespace detail

inline std::string encode(const Table& t, Precision precision) {
  require_shape(static_cast<Eigen::Index>(t.ids.size()) == t.values.rows(), "cemb ids vs rows");
  std::string buf = "CEMB";
  buf.push_back(static_cast<char>(precision));
  detail::put_u32(buf, static_cast<std::uint32_t>(t.ids.size()));
  detail::put_u32(buf, static_cast<std::uint32_t>(t.values.cols()));
  for (std::size_t r = 0; r < t.ids.size(); ++r) {
    detail::put_u32(buf, t.ids[r]);
    for (Eigen::Index c = 0; c < t.values.cols(); ++c) {
      const double v = t.values(static_cast<Eigen::Index>(r), c);
      if (precision == Precision::f32)
        detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        detail::put_u64(buf, std::bit_cast<std::uint64_t>(v));
    }
  }
  return buf;
}

inline Table decode(const std::string& bytes, const std::string& source = "<buffer>") {
  auto fail = [&](const std::string& why) { throw FormatError(source + ": " + why); };
  if (bytes.size() < 13 || bytes.compare(0, 4, "CEMB") != 0) fail("bad magic bytes (expected CEMB)");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto version = p[4];
  if (version != 1 && version != 2) fail("unsupported format version " + std::to_string(version));
  const int width = version == 1 ? 4 : 8;
  const auto count = static_cast<std::size_t>(detail::get_le(p + 5, 4));
  const auto dim = static_cast<std::size_t>(detail::get_le(p + 9, 4));
  const std::size_t expect = 13 + count * (4 + dim * static_cast<std::size_t>(width));
  if (bytes.size() != expect) fail("truncated or oversized payload");
  Table t;
  t.ids.resize(count);
  t.values.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  const unsigned char* q = p + 13;
  for (std::size_t r = 0; r < count; ++r) {
    t.ids[r] = static_cast<std::uint32_t>(detail::get_le(q, 4));
    q += 4;
    for (std::size_t c = 0; c < dim; ++c) {
      double v;
      if (width == 4)
        v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(q, 4)));
      else
        v = std::bit_cast<double>(detail::get_le(q, 8));
      t.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
      q += width;
    }
  }
  return t;
}

inline void write(const fs::path& path, const Table& t, Precision precision = Precision::f32) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const auto buf = encode(t, precision);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

// Rows of m become records with ids 0..rows-1.
inline void write_dense(const fs::path& path, const Matrix& m, Precision precision = Precision::f32) {
  Table t;
  t.ids.resize(static_cast<std::size_t>(m.rows()));
  for (std::size_t r = 0; r < t.ids.size(); ++r) t.ids[r] = static_cast<std::uint32_t>(r);
  t.values = m;
  write(path, t, precision);
}

inline Table read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("missing tensor file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

// Reads a table and orders it densely by id; every id in [0, expected_rows)
// must appear exactly once.
inline Matrix read_dense(const fs::path& path, Index expected_rows) {
  Table t = read(path);
  Matrix out(expected_rows, t.values.cols());
  std::vector<char> hit(static_cast<std::size_t>(expected_rows), 0);
  for (std::size_t r = 0; r < t.ids.size(); ++r) {
    const auto id = static_cast<Index>(t.ids[r]);
    if (id >= expected_rows) throw FormatError(path.string() + ": id " + std::to_string(id) + " out of range");
    if (hit[static_cast<std::size_t>(id)]) throw FormatError(path.string() + ": duplicate id " + std::to_string(id));
    hit[static_cast<std::size_t>(id)] = 1;
    out.row(id) = t.values.row(static_cast<Eigen::Index>(r));
  }
  std::string missing;
  for (Index k = 0; k < expected_rows; ++k)
    if (!hit[static_cast<std::size_t>(k)]) missing += (missing.empty() ? "" : ",") + std::to_string(k);
  if (!missing.empty()) throw CoverageError(path.string() + ": missing ids " + missing);
  return out;
}

}  // namespace cllmr::cemb
