#pragma once

// Little-endian primitives shared by the checkpoint and dataset formats.

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace capseq::binary {

void write_u8(std::ostream& out, std::uint8_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, std::string_view s);  // u32 length + bytes

// Reads with byte-offset tracking; every failure throws FormatError naming
// the offset and what was being read.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint8_t u8(std::string_view what);
  std::uint32_t u32(std::string_view what);
  std::uint64_t u64(std::string_view what);
  double f64(std::string_view what);
  std::string string(std::string_view what, std::uint32_t max_len = 1u << 20);
  void bytes(char* dst, std::size_t n, std::string_view what);
  void expect_magic(std::string_view magic);
  bool at_end();

  std::uint64_t offset() const noexcept { return offset_; }
  [[noreturn]] void fail(std::string_view what, std::string_view reason) const;

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace capseq::binary
