#pragma once

// Little-endian primitives shared by the VEF1 and VEC1 formats. Values are
// assembled byte by byte so files are identical on any host.

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "vekit/errors.hpp"

namespace vekit::binary {

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }

  void str16(std::string_view s) {
    if (s.size() > UINT16_MAX) throw ContractError("string too long for a u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }

  const std::vector<char>& data() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("write failed: " + path);
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }

  std::vector<char> buf_;
};

/// Bounds-checked cursor; running past the end raises CorruptionError at the
/// offset where the read started.
class Reader {
 public:
  explicit Reader(std::vector<char> data) : buf_(std::move(data)) {}

  static Reader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    return Reader(std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(get(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::string str16(const char* what) {
    const auto n = u16(what);
    return bytes(n, what);
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw CorruptionError(pos_, std::string("truncated while reading ") + what + " (need " + std::to_string(n) +
                                      " bytes, have " + std::to_string(remaining()) + ")");
    }
  }

  std::uint64_t get(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace vekit::binary
