#pragma once

// Checkpoint container.
//
//   "CSQ1"                      4 bytes magic
//   u32 version                 currently 1
//   u64 entry count
//   per entry:
//     u32 name length, UTF-8 name bytes
//     u32 rank, rank x u64 extents
//     product(extents) x f64, little-endian IEEE-754
//
// Round trips are bit-exact.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "capseq/autodiff.hpp"
#include "capseq/optim.hpp"
#include "capseq/tensor.hpp"

namespace capseq {

inline constexpr char kCheckpointMagic[] = "CSQ1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

std::vector<NamedTensor> snapshot(const ParameterStore& store);

// Copies matching entries into `store`. Every parameter must be present
// with an identical shape; otherwise ValidationError names both shapes.
// Entries not in the store are ignored.
void restore(ParameterStore& store, const std::vector<NamedTensor>& entries);

// Resumable training state: parameters, Adam moments ("adam.m.<name>",
// "adam.v.<name>") and scalar metadata ("meta.<key>"). The optimizer step
// count travels as meta.optimizer_steps. Loadable by restore() as a plain
// parameter checkpoint.
std::vector<NamedTensor> snapshot_training(const ParameterStore& store, const Optimizer& optimizer,
                                           const std::map<std::string, double>& meta);
std::map<std::string, double> restore_training(ParameterStore& store, Optimizer& optimizer,
                                               const std::vector<NamedTensor>& entries);

}  // namespace capseq
