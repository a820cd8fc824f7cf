#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace capseq {

// Grayscale raster with integer intensities in [0, max_value].
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint32_t max_value = 255;
  std::vector<std::uint16_t> pixels;

  friend bool operator==(const RawImage&, const RawImage&) = default;
};

// Floating-point single-channel raster, row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

// Half-pixel-centred bilinear interpolation with edge clamping.
Image resize_bilinear(const Image& src, std::size_t height, std::size_t width);

// Binary (P5) or ASCII (P2) portable graymap, 8 or 16 bit.
RawImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const RawImage& image, bool ascii = true);

}  // namespace capseq
