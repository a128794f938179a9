#pragma once

// Little-endian binary primitives, independent of the host byte order.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "sauron/error.hpp"

namespace sauron::binio {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}
inline void put_i64(std::ostream& os, std::int64_t v) { put_u64(os, static_cast<std::uint64_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }
inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

/// Reader that throws `E` with the given context on a short read.
template <typename E = Error>
class Reader {
 public:
  Reader(std::istream& is, std::string context) : is_(is), context_(std::move(context)) {}

  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw E(context_ + ": truncated file");
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string string(std::size_t max_len = 1 << 20) {
    const std::uint32_t n = u32();
    if (n > max_len) throw E(context_ + ": implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string context_;
};

}  // namespace sauron::binio
