#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "epidepth/tensor.hpp"

namespace epidepth {

// Flat binary tensor format: magic "TNSR", version u32, rank u32,
// extents u32[rank], little-endian float64 payload.

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t& at, const char* what) {
  if (at + 4 > buf.size()) throw ContractViolation(std::string("tensor file: truncated before ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  at += 4;
  return v;
}

inline void put_f64(std::string& buf, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64(const std::string& buf, std::size_t& at) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  at += 8;
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline constexpr std::uint32_t kTensorFormatVersion = 1;

inline std::string tensor_to_bytes(const Tensor& t) {
  std::string buf;
  buf += "TNSR";
  detail::put_u32(buf, kTensorFormatVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(e));
  buf.reserve(buf.size() + 8 * static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) detail::put_f64(buf, t.data()[i]);
  return buf;
}

inline Tensor tensor_from_bytes(const std::string& buf, std::size_t& at) {
  if (at + 4 > buf.size() || buf.compare(at, 4, "TNSR") != 0)
    throw ContractViolation("tensor file: bad magic (expected TNSR)");
  at += 4;
  std::uint32_t version = detail::get_u32(buf, at, "version");
  if (version != kTensorFormatVersion)
    throw ContractViolation("tensor file: unsupported version " + std::to_string(version));
  std::uint32_t rank = detail::get_u32(buf, at, "rank");
  if (rank == 0 || rank > 8) throw ContractViolation("tensor file: bad rank " + std::to_string(rank));
  ShapeVec shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<Index>(detail::get_u32(buf, at, "extent"));
  Index n = numel(shape);
  if (at + 8 * static_cast<std::size_t>(n) > buf.size())
    throw ContractViolation("tensor file: truncated payload");
  std::vector<double> data(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) data[static_cast<std::size_t>(i)] = detail::get_f64(buf, at);
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor tensor_from_bytes(const std::string& buf) {
  std::size_t at = 0;
  Tensor t = tensor_from_bytes(buf, at);
  if (at != buf.size()) throw ContractViolation("tensor file: trailing bytes");
  return t;
}

inline void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot open for writing: " + path);
  std::string buf = tensor_to_bytes(t);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw ContractViolation("write failed: " + path);
}

inline Tensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return tensor_from_bytes(buf);
}

}  // namespace epidepth
