#pragma once

// Little-endian byte writer/reader shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "fedenergy/errors.hpp"

namespace fedenergy::detail {

static_assert(std::endian::native == std::endian::little,
              "byte codecs assume a little-endian host");

inline std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void f64s(const double* data, std::size_t n) { raw(data, n * sizeof(double)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(std::string_view s) { raw(s.data(), s.size()); }
  void crc() { u32(crc32_ieee(buf_)); }

  std::size_t size() const { return buf_.size(); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint16_t u16() { return take<std::uint16_t>(); }
  std::uint32_t u32() { return take<std::uint32_t>(); }
  double f64() { return take<double>(); }
  void f64s(double* out, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(std::size_t n) {
    auto s = bytes(n);
    return {reinterpret_cast<const char*>(s.data()), s.size()};
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) {
      throw LengthError("truncated input: need " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", have " + std::to_string(remaining()));
    }
  }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Verifies the trailing CRC32 over everything before it.
inline void check_trailing_crc(std::span<const std::uint8_t> frame, std::string_view what) {
  if (frame.size() < 4) throw LengthError(std::string(what) + ": too short for checksum");
  const auto body = frame.first(frame.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, frame.data() + body.size(), 4);
  if (stored != crc32_ieee(body)) {
    throw CorruptionError(std::string(what) + ": CRC32 mismatch");
  }
}

}  // namespace fedenergy::detail
