#pragma once

// Little-endian byte encoding shared by the dataset, model and reservoir
// containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "oseg/errors.hpp"
#include "oseg/kernel.hpp"

namespace oseg {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    u64(s.size());
    bytes(s);
  }
  void matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
  }
  void vector(const Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }

  const std::string& data() const { return buf_; }
  std::string take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  std::string buf_;
};

/// Bounds-checked reader; errors report absolute file offsets.
class ByteReader {
 public:
  ByteReader(std::span<const char> data, std::uint64_t base_offset = 0) : data_(data), base_(base_offset) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(checked_count(u64(), 1)); }
  Matrix matrix() {
    const auto rows = u64();
    const auto cols = u64();
    if (cols != 0 && rows > remaining() / 8 / cols) fail("matrix exceeds remaining bytes");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
    return m;
  }
  Vector vector() {
    const auto n = checked_count(u64(), 8);
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f64();
    return v;
  }

  /// Validates an element count against the bytes left.
  std::size_t checked_count(std::uint64_t n, std::size_t elem_bytes) {
    if (elem_bytes > 0 && n > remaining() / elem_bytes) fail("length field exceeds remaining bytes");
    return static_cast<std::size_t>(n);
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::uint64_t offset() const { return base_ + pos_; }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, offset()); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) fail("unexpected end of data");
  }
  std::span<const char> data_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
};

}  // namespace oseg
