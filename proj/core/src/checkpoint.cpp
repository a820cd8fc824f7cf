#include "capseq/checkpoint.hpp"

#include <fstream>
#include <string_view>
#include <unordered_map>

#include "capseq/binary_io.hpp"
#include "capseq/error.hpp"

namespace capseq {

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries) {
  out.write(kCheckpointMagic, 4);
  binary::write_u32(out, kCheckpointVersion);
  binary::write_u64(out, entries.size());
  for (const auto& e : entries) {
    binary::write_string(out, e.name);
    binary::write_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) binary::write_u64(out, d);
    for (double v : e.value.values()) binary::write_f64(out, v);
  }
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  binary::Reader r(in);
  r.expect_magic(std::string_view(kCheckpointMagic, 4));
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("version", "unsupported version " + std::to_string(version));
  const auto count = r.u64("entry count");
  std::vector<NamedTensor> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.string("entry name", 4096);
    const auto rank = r.u32("rank");
    if (rank > 8) r.fail("rank", "rank " + std::to_string(rank) + " too large");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = r.u64("extent");
      n *= d;
      if (n > (1ULL << 32)) r.fail("extent", "tensor too large");
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64("tensor values of '" + e.name + "'");
    e.value = Tensor(std::move(shape), std::move(values));
    entries.push_back(std::move(e));
  }
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  write_checkpoint(out, entries);
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<NamedTensor> snapshot(const ParameterStore& store) {
  std::vector<NamedTensor> out;
  for (const Parameter* p : store.all()) out.push_back({p->name, p->value});
  return out;
}

void restore(ParameterStore& store, const std::vector<NamedTensor>& entries) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (Parameter* p : store.all()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw ValidationError("checkpoint lacks parameter '" + p->name + "'");
    if (it->second->value.shape() != p->value.shape()) {
      throw ValidationError("parameter '" + p->name + "' has shape " + to_string(it->second->value.shape()) +
                            " in checkpoint but " + to_string(p->value.shape()) + " in the configured model");
    }
  }
  for (Parameter* p : store.all()) p->value = by_name[p->name]->value;
}

std::vector<NamedTensor> snapshot_training(const ParameterStore& store, const Optimizer& optimizer,
                                           const std::map<std::string, double>& meta) {
  std::vector<NamedTensor> out = snapshot(store);
  std::map<std::string, const Optimizer::Moments*> sorted;
  for (const auto& [name, m] : optimizer.moments()) sorted[name] = &m;
  for (const auto& [name, m] : sorted) {
    out.push_back({"adam.m." + name, m->m});
    out.push_back({"adam.v." + name, m->v});
  }
  auto scalar = [](double v) {
    Tensor t({1});
    t[0] = v;
    return t;
  };
  out.push_back({"meta.optimizer_steps", scalar(static_cast<double>(optimizer.step_count()))});
  for (const auto& [key, v] : meta) out.push_back({"meta." + key, scalar(v)});
  return out;
}

std::map<std::string, double> restore_training(ParameterStore& store, Optimizer& optimizer,
                                               const std::vector<NamedTensor>& entries) {
  restore(store, entries);
  std::unordered_map<std::string, Optimizer::Moments> moments;
  std::map<std::string, double> meta;
  for (const auto& e : entries) {
    const std::string_view name = e.name;
    if (name.starts_with("adam.m.")) {
      moments[std::string(name.substr(7))].m = e.value;
    } else if (name.starts_with("adam.v.")) {
      moments[std::string(name.substr(7))].v = e.value;
    } else if (name.starts_with("meta.")) {
      if (e.value.size() != 1) throw FormatError("checkpoint entry " + e.name + " is not a scalar");
      meta[std::string(name.substr(5))] = e.value[0];
    }
  }
  for (const auto& [name, m] : moments) {
    const Parameter* p = store.find(name);
    if (p == nullptr || m.m.shape() != p->value.shape() || m.v.shape() != p->value.shape()) {
      throw ValidationError("checkpoint optimizer state for '" + name + "' does not match the model");
    }
  }
  auto steps = meta.find("optimizer_steps");
  if (steps == meta.end()) throw FormatError("checkpoint has no training state (meta.optimizer_steps missing)");
  optimizer.restore(static_cast<std::size_t>(steps->second), std::move(moments));
  meta.erase(steps);
  return meta;
}

}  // namespace capseq
