#pragma once

#include <cstdint>
#include <cstddef>
#include <string_view>

namespace mixline {

// CRC-64/XZ (reflected, poly 0x42f0e1eba9ea3693), used for dataset section
// integrity checks.
inline std::uint64_t crc64(const void* data, std::size_t len, std::uint64_t crc = 0) {
  static const auto table = [] {
    struct Table { std::uint64_t t[256]; } tb{};
    const std::uint64_t poly = 0xc96c5795d7870f42ULL;  // reflected 0x42f0e1eba9ea3693
    for (int i = 0; i < 256; ++i) {
      std::uint64_t c = static_cast<std::uint64_t>(i);
      for (int k = 0; k < 8; ++k) c = (c & 1) ? (c >> 1) ^ poly : c >> 1;
      tb.t[i] = c;
    }
    return tb;
  }();
  const auto* p = static_cast<const unsigned char*>(data);
  crc = ~crc;
  for (std::size_t i = 0; i < len; ++i) crc = table.t[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
  return ~crc;
}

// FNV-1a 64-bit; used for environment config digests.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mixline
