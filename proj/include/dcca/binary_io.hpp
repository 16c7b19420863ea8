#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "dcca/error.hpp"

// Little-endian byte buffers shared by the dataset, checkpoint and index
// formats. Readers never index past the buffer; short input is a format error.
namespace dcca::io {

inline std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - done, 1u << 30);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done),
                  static_cast<uInt>(chunk));
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view bytes) { buf_.append(bytes); }
  /// u32 length prefix followed by the bytes.
  void str(std::string_view s) {
    require(s.size() <= UINT32_MAX, ErrorCode::kRange, "string too long to serialize");
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  /// u64 length, payload, CRC32 of the payload.
  void block(std::string_view payload) {
    u64(payload.size());
    raw(payload);
    u32(crc32(payload));
  }

  const std::string& bytes() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data, std::string what = "file")
      : data_(data), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string_view raw(std::size_t n) {
    need(n);
    const std::string_view out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() { return std::string(raw(u32())); }
  std::string_view block() {
    const std::uint64_t n = u64();
    need(n);
    const std::string_view payload = raw(static_cast<std::size_t>(n));
    const std::uint32_t stored = u32();
    require(stored == crc32(payload), ErrorCode::kChecksum, what_ + ": block checksum mismatch");
    return payload;
  }

  void magic(std::string_view expected) {
    need(expected.size());
    require(raw(expected.size()) == expected, ErrorCode::kFormat,
            what_ + ": bad magic, expected " + std::string(expected));
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void expect_end() const {
    require(remaining() == 0, ErrorCode::kFormat, what_ + ": trailing bytes after payload");
  }
  /// Guards element counts read from a header before allocating for them.
  void need(std::uint64_t n) const {
    require(n <= remaining(), ErrorCode::kFormat, what_ + ": truncated");
  }
  /// Same guard for `count` items of `item_size` bytes, without overflow.
  void need_items(std::uint64_t count, std::uint64_t item_size) const {
    require(count <= remaining() / item_size, ErrorCode::kFormat, what_ + ": truncated");
  }
  const std::string& what() const noexcept { return what_; }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  require(!in.bad(), ErrorCode::kIo, "read failed for " + path.string());
  return bytes;
}

/// Writes through a sibling temporary and renames, so readers never observe
/// a half-written file.
inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    fail(ErrorCode::kIo, "cannot rename onto " + path.string());
  }
}

}  // namespace dcca::io
