// SPDX-License-Identifier: Apache-2.0
// Little-endian byte buffer writer/reader shared by the binary file formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "countadapt/common.hpp"

namespace countadapt::binio {

template <typename U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out = static_cast<U>((out << 8) | (v & 0xff));
      v >>= 8;
    }
    return out;
  } else {
    return v;
  }
}

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { raw(to_le(v)); }
  void u64(std::uint64_t v) { raw(to_le(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void f64s(std::span<const double> v) {
    for (double x : v) f64(x);
  }

  const std::vector<char>& buffer() const { return buf_; }
  std::string_view view() const { return {buf_.data(), buf_.size()}; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error(ErrorCode::io_error, "short write to " + path.string());
  }

 private:
  template <typename U>
  void raw(U v) {
    char tmp[sizeof(U)];
    std::memcpy(tmp, &v, sizeof(U));
    buf_.insert(buf_.end(), tmp, tmp + sizeof(U));
  }
  std::vector<char> buf_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Reader {
 public:
  Reader(std::span<const char> data, std::string origin) : data_(data), origin_(std::move(origin)) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t max_len = 4096) {
    const auto n = u32();
    if (n > max_len) fail("string field too long");
    return std::string(bytes(n));
  }
  void f64s(std::span<double> out) {
    for (double& x : out) x = f64();
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const {
    if (remaining() != 0) fail("trailing bytes after payload");
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw Error(ErrorCode::format_error, origin_ + ": " + why);
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) fail("truncated file");
  }
  template <typename U>
  U raw() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_le(v);
  }

  std::span<const char> data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace countadapt::binio
