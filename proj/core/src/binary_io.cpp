#include "capseq/binary_io.hpp"

#include <array>
#include <bit>
#include <cstring>

#include "capseq/error.hpp"

namespace capseq::binary {

namespace {

template <typename T>
void write_le(std::ostream& out, T v) {
  std::array<char, sizeof(T)> buf{};
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf.data(), buf.size());
}

template <typename T>
T decode_le(const std::array<char, sizeof(T)>& buf) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { write_le(out, v); }
void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& out, std::string_view s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void Reader::fail(std::string_view what, std::string_view reason) const {
  throw FormatError("at byte offset " + std::to_string(offset_) + " reading " + std::string(what) + ": " +
                    std::string(reason));
}

void Reader::bytes(char* dst, std::size_t n, std::string_view what) {
  in_.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) fail(what, "truncated input");
  offset_ += n;
}

std::uint8_t Reader::u8(std::string_view what) {
  std::array<char, 1> buf{};
  bytes(buf.data(), buf.size(), what);
  return decode_le<std::uint8_t>(buf);
}

std::uint32_t Reader::u32(std::string_view what) {
  std::array<char, 4> buf{};
  bytes(buf.data(), buf.size(), what);
  return decode_le<std::uint32_t>(buf);
}

std::uint64_t Reader::u64(std::string_view what) {
  std::array<char, 8> buf{};
  bytes(buf.data(), buf.size(), what);
  return decode_le<std::uint64_t>(buf);
}

double Reader::f64(std::string_view what) { return std::bit_cast<double>(u64(what)); }

std::string Reader::string(std::string_view what, std::uint32_t max_len) {
  const std::uint32_t n = u32(what);
  if (n > max_len) fail(what, "length " + std::to_string(n) + " exceeds limit " + std::to_string(max_len));
  std::string s(n, '\0');
  if (n > 0) bytes(s.data(), n, what);
  return s;
}

void Reader::expect_magic(std::string_view magic) {
  std::string got(magic.size(), '\0');
  bytes(got.data(), got.size(), "magic bytes");
  if (got != magic) {
    offset_ = 0;
    fail("magic bytes", "expected \"" + std::string(magic) + "\"");
  }
}

bool Reader::at_end() { return in_.peek() == std::char_traits<char>::eof(); }

}  // namespace capseq::binary
