#include "pfx/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pfx/common.hpp"

namespace pfx::io {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

void Writer::magic(std::string_view m) {
  for (char c : m) buf_.push_back(static_cast<std::uint8_t>(c));
}

void Writer::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void Writer::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void Writer::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
}

void Writer::floats(std::span<const float> v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  buf_.insert(buf_.end(), p, p + v.size_bytes());
}

void Reader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) throw Error("unexpected end of file");
}

void Reader::expect_magic(std::string_view m) {
  need(m.size());
  if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0)
    throw Error("bad magic, expected \"" + std::string(m) + "\"");
  pos_ += m.size();
}

std::uint8_t Reader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
  const auto n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<float> Reader::floats(std::size_t n) {
  need(n * sizeof(float));
  std::vector<float> out(n);
  std::memcpy(out.data(), data_.data() + pos_, n * sizeof(float));
  pos_ += n * sizeof(float);
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("short write to " + path);
}

std::uint32_t crc32(std::span<const std::uint8_t> data) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(::crc32(c, data.data(), static_cast<uInt>(data.size())));
}

std::string content_hash(std::span<const std::uint8_t> data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : data) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string content_hash(std::string_view text) {
  return content_hash(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace pfx::io
