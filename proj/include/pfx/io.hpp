#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pfx::io {

// Little-endian binary buffer used by every on-disk format in the project.
class Writer {
 public:
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void magic(std::string_view m);
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(std::string_view s);
  void floats(std::span<const float> v);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view m);
  std::uint8_t u8();
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::vector<float> floats(std::size_t n);

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> data);

std::uint32_t crc32(std::span<const std::uint8_t> data);

/// Short hex content hash (FNV-1a 64) used for config and bank fingerprints.
std::string content_hash(std::span<const std::uint8_t> data);
std::string content_hash(std::string_view text);

}  // namespace pfx::io
