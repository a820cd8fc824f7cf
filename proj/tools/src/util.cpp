#include <cstdio>
#include <fstream>

#include "capseq/error.hpp"
#include "commands.hpp"

namespace capseq::cli {

void require_exists(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw ValidationError(what + " " + path.string() + " does not exist");
}

void check_collision(const fs::path& path, bool overwrite, bool resume) {
  if (fs::exists(path) && !overwrite && !resume) {
    throw ValidationError(path.string() + " already exists; pass --overwrite to replace it or --resume to continue");
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace capseq::cli
