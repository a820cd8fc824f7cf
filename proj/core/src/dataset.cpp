#include "capseq/dataset.hpp"

#include <fstream>

#include "capseq/binary_io.hpp"
#include "capseq/error.hpp"

namespace capseq {

void write_dataset(std::ostream& out, std::span<const DatasetRecord> records) {
  for (const auto& r : records) {
    const auto& first = records.front().image;
    if (r.image.height != first.height || r.image.width != first.width) {
      throw ValidationError("record '" + r.id + "' image is " + std::to_string(r.image.height) + "x" +
                            std::to_string(r.image.width) + " but the container holds " +
                            std::to_string(first.height) + "x" + std::to_string(first.width));
    }
    if (r.image.values.size() != r.image.height * r.image.width) {
      throw ValidationError("record '" + r.id + "' image has inconsistent extents");
    }
  }
  out.write(kDatasetMagic, 4);
  binary::write_u32(out, kDatasetVersion);
  binary::write_u64(out, records.size());
  for (const auto& r : records) {
    binary::write_string(out, r.id);
    binary::write_u32(out, static_cast<std::uint32_t>(r.labels.size()));
    for (const auto& l : r.labels) {
      binary::write_string(out, l.pathology);
      binary::write_u8(out, static_cast<std::uint8_t>(l.polarity));
    }
    binary::write_u32(out, static_cast<std::uint32_t>(r.tokens.size()));
    for (const auto& t : r.tokens) binary::write_string(out, t);
    binary::write_u32(out, static_cast<std::uint32_t>(r.image.height));
    binary::write_u32(out, static_cast<std::uint32_t>(r.image.width));
    for (double v : r.image.values) binary::write_f64(out, v);
  }
}

std::vector<DatasetRecord> read_dataset(std::istream& in) {
  binary::Reader rd(in);
  rd.expect_magic(std::string_view(kDatasetMagic, 4));
  const auto version = rd.u32("version");
  if (version != kDatasetVersion) rd.fail("version", "unsupported version " + std::to_string(version));
  const auto count = rd.u64("record count");
  std::vector<DatasetRecord> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    DatasetRecord r;
    r.id = rd.string("record id", 4096);
    const auto n_labels = rd.u32("label count");
    for (std::uint32_t k = 0; k < n_labels; ++k) {
      Label l;
      l.pathology = rd.string("label name", 4096);
      const auto pol = rd.u8("label polarity");
      if (pol > 2) rd.fail("label polarity", "invalid value " + std::to_string(pol));
      l.polarity = static_cast<Polarity>(pol);
      r.labels.push_back(std::move(l));
    }
    const auto n_tokens = rd.u32("token count");
    for (std::uint32_t k = 0; k < n_tokens; ++k) r.tokens.push_back(rd.string("token", 4096));
    r.image.height = rd.u32("image height");
    r.image.width = rd.u32("image width");
    if (!records.empty() && (r.image.height != records[0].image.height || r.image.width != records[0].image.width)) {
      rd.fail("image extents", "record extents differ from the first record");
    }
    const std::uint64_t n = static_cast<std::uint64_t>(r.image.height) * r.image.width;
    if (n > (1ULL << 28)) rd.fail("image extents", "image too large");
    r.image.values.resize(n);
    for (auto& v : r.image.values) v = rd.f64("pixel values of '" + r.id + "'");
    records.push_back(std::move(r));
  }
  if (!rd.at_end()) rd.fail("end of container", "trailing bytes");
  return records;
}

void pack_dataset(const std::filesystem::path& path, std::span<const DatasetRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open dataset for writing: " + path.string());
  write_dataset(out, records);
  if (!out) throw Error("failed writing dataset: " + path.string());
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset: " + path.string());
  try {
    return read_dataset(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace capseq
