#pragma once

// Packed dataset container.
//
//   "CSDS"                      4 bytes magic
//   u32 version                 currently 1
//   u64 record count
//   per record:
//     u32 length + id bytes
//     u32 label count, per label: u32 length + name bytes, u8 polarity
//     u32 token count, per token: u32 length + token bytes
//     u32 height, u32 width, height*width x f64 pixel values
//
// All records share one image extent.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "capseq/image.hpp"
#include "capseq/report_prep.hpp"

namespace capseq {

inline constexpr char kDatasetMagic[] = "CSDS";
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetRecord {
  std::string id;
  std::vector<Label> labels;
  TokenList tokens;
  Image image;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

void write_dataset(std::ostream& out, std::span<const DatasetRecord> records);
std::vector<DatasetRecord> read_dataset(std::istream& in);

void pack_dataset(const std::filesystem::path& path, std::span<const DatasetRecord> records);
std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path);

}  // namespace capseq
