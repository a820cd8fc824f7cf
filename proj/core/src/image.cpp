#include "capseq/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "capseq/error.hpp"

namespace capseq {

Image resize_bilinear(const Image& src, std::size_t height, std::size_t width) {
  if (src.height == 0 || src.width == 0 || src.values.size() != src.height * src.width) {
    throw ValidationError("resize: source image has zero area or inconsistent extents");
  }
  if (height == 0 || width == 0) throw ValidationError("resize: target extents must be positive");
  Image out{height, width, std::vector<double>(height * width)};
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  auto coord = [](std::size_t dst, double scale, std::size_t limit, std::size_t& lo, std::size_t& hi) {
    double c = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(limit - 1));
    lo = static_cast<std::size_t>(std::floor(c));
    hi = std::min(lo + 1, limit - 1);
    return c - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    const double fy = coord(y, sy, src.height, y0, y1);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      const double fx = coord(x, sx, src.width, x0, x1);
      const double top = src.at(y0, x0) + fx * (src.at(y0, x1) - src.at(y0, x0));
      const double bottom = src.at(y1, x0) + fx * (src.at(y1, x1) - src.at(y1, x0));
      out.values[y * width + x] = top + fy * (bottom - top);
    }
  }
  return out;
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string pgm_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += c;
  }
  if (tok.empty()) throw FormatError(path.string() + ": truncated PGM header");
  return tok;
}

std::size_t pgm_number(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = pgm_token(in, path);
  try {
    std::size_t used = 0;
    const auto v = std::stoull(tok, &used);
    if (used != tok.size()) throw FormatError("");
    return v;
  } catch (...) {
    throw FormatError(path.string() + ": bad PGM number '" + tok + "'");
  }
}

}  // namespace

RawImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  const std::string magic = pgm_token(in, path);
  if (magic != "P2" && magic != "P5") throw FormatError(path.string() + ": not a PGM file (magic '" + magic + "')");
  RawImage img;
  img.width = pgm_number(in, path);
  img.height = pgm_number(in, path);
  const auto maxval = pgm_number(in, path);
  if (maxval == 0 || maxval > 65535) throw FormatError(path.string() + ": PGM maxval out of range");
  img.max_value = static_cast<std::uint32_t>(maxval);
  const std::size_t n = img.width * img.height;
  img.pixels.resize(n);
  if (magic == "P2") {
    for (auto& p : img.pixels) {
      const auto v = pgm_number(in, path);
      if (v > maxval) throw FormatError(path.string() + ": pixel exceeds maxval");
      p = static_cast<std::uint16_t>(v);
    }
  } else {
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(n * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw FormatError(path.string() + ": truncated PGM data");
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned v = bytes_per == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
      if (v > maxval) throw FormatError(path.string() + ": pixel exceeds maxval");
      img.pixels[i] = static_cast<std::uint16_t>(v);
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const RawImage& image, bool ascii) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write image " + path.string());
  out << (ascii ? "P2" : "P5") << '\n' << image.width << ' ' << image.height << '\n' << image.max_value << '\n';
  if (ascii) {
    for (std::size_t y = 0; y < image.height; ++y) {
      for (std::size_t x = 0; x < image.width; ++x) {
        if (x > 0) out << ' ';
        out << image.pixels[y * image.width + x];
      }
      out << '\n';
    }
    return;
  }
  for (auto p : image.pixels) {
    if (image.max_value > 255) out.put(static_cast<char>(p >> 8));
    out.put(static_cast<char>(p & 0xFF));
  }
}

}  // namespace capseq
