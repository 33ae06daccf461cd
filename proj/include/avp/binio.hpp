#pragma once

// Little-endian binary stream helpers with a running FNV-1a digest, used by
// every binary artifact (dataset shards, observation containers, checkpoints).

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "avp/checksum.hpp"
#include "avp/trajio.hpp"

namespace avp::binio {

class CheckedWriter {
 public:
  explicit CheckedWriter(std::ostream& os) : os_(os) {}
  void bytes(const void* p, std::size_t n) {
    os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    hash_.update(p, n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    bytes(b, 4);
  }
  void u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    bytes(b, 8);
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  // Trailing digest, itself excluded from the hash.
  void finish() {
    std::uint64_t d = hash_.digest();
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(d >> (8 * i));
    os_.write(reinterpret_cast<const char*>(b), 8);
  }

 private:
  std::ostream& os_;
  Fnv1a64 hash_;
};

class CheckedReader {
 public:
  CheckedReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}
  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw trajio::TruncatedFile(what_ + ": unexpected end of stream");
    hash_.update(p, n);
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint8_t b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::uint32_t max_len = (1u << 24)) {
    std::uint32_t n = u32();
    if (n > max_len) throw trajio::MalformedRecord(what_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void verify_digest() {
    std::uint64_t want = hash_.digest();
    std::uint8_t b[8];
    is_.read(reinterpret_cast<char*>(b), 8);
    if (is_.gcount() != 8) throw trajio::TruncatedFile(what_ + ": missing trailing checksum");
    std::uint64_t got = 0;
    for (int i = 0; i < 8; ++i) got |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    if (got != want)
      throw trajio::ChecksumMismatch(what_ + ": checksum mismatch (stored " + std::to_string(got) +
                                     ", computed " + std::to_string(want) + ")");
  }

 private:
  std::istream& is_;
  std::string what_;
  Fnv1a64 hash_;
};

}  // namespace avp::binio
