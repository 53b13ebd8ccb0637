#pragma once

// Little-endian primitive I/O shared by the dataset and checkpoint formats.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace sparling::binio {

/// Raised on malformed, truncated or mismatched binary files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("unexpected end of file");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_le<std::uint8_t>(os, v); }
inline void put_u16(std::ostream& os, std::uint16_t v) { put_le<std::uint16_t>(os, v); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_le<std::uint32_t>(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_le<std::uint64_t>(os, v); }
inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(os, bits);
}
inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint8_t get_u8(std::istream& is) { return get_le<std::uint8_t>(is); }
inline std::uint16_t get_u16(std::istream& is) { return get_le<std::uint16_t>(is); }
inline std::uint32_t get_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
inline std::uint64_t get_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
inline float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}
inline std::string get_string(std::istream& is, std::uint32_t max_len = 1u << 26) {
  const std::uint32_t n = get_u32(is);
  if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw FormatError("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  if (!is.read(got, 4)) throw FormatError("unexpected end of file reading magic");
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected \"") + magic + "\"");
  }
}

/// FNV-1a, 64-bit.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace sparling::binio
