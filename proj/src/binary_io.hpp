#pragma once

// Little-endian primitive readers/writers shared by the TNSR, PFCK and PFPR
// codecs. Readers track the absolute byte offset for error messages.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "patchforge/errors.hpp"

namespace patchforge::detail {

inline void put_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <class U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  put_bytes(out, buf, sizeof(U));
}

inline void put_f32(std::ostream& out, float value) { put_le(out, std::bit_cast<std::uint32_t>(value)); }

class Reader {
 public:
  Reader(std::istream& in, std::uint64_t origin) : in_(in), offset_(origin) {}

  std::uint64_t offset() const noexcept { return offset_; }

  void bytes(void* dst, std::size_t n, std::string_view what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("truncated input while reading " + std::string(what), offset_ + in_.gcount());
    }
    offset_ += n;
  }

  template <class U>
  U le(std::string_view what) {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    return value;
  }

  float f32(std::string_view what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }

  void expect_magic(std::string_view magic) {
    const std::uint64_t at = offset_;
    char buf[8] = {};
    bytes(buf, magic.size(), "magic");
    if (std::string_view(buf, magic.size()) != magic) {
      throw FormatError("bad magic: expected \"" + std::string(magic) + "\"", at);
    }
  }

 private:
  std::istream& in_;
  std::uint64_t offset_;
};

}  // namespace patchforge::detail
