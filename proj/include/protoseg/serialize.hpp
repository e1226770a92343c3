#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/tensor.hpp"

namespace protoseg::io {

// Explicit little-endian primitives; doubles travel as IEEE-754 bit patterns
// so round trips are byte-exact.

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(out, bits);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("read_u32: truncated stream");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("read_u64: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

inline void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u64(out, static_cast<std::uint64_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) write_f64(out, t[i]);
}

inline Tensor read_tensor(std::istream& in, bool requires_grad = false) {
  const std::uint32_t rank = read_u32(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("read_tensor: implausible rank");
  std::vector<std::size_t> shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = static_cast<std::size_t>(read_u64(in));
    n *= d;
  }
  std::vector<double> data(n);
  for (double& v : data) v = read_f64(in);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

}  // namespace protoseg::io
