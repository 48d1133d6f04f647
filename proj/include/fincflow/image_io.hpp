#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fincflow {

// 8-bit image, planar (C, H, W).
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t c, std::size_t h, std::size_t w) { return pixels[(c * height + h) * width + w]; }
  std::uint8_t at(std::size_t c, std::size_t h, std::size_t w) const { return pixels[(c * height + h) * width + w]; }
};

// Binary PGM (P5, 1 channel) or PPM (P6, 3 channels), maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& img);

// Lays the channels out left to right as one grey image, for channel counts
// PNM cannot hold.
Image tile_channels(const Image& img);

}  // namespace fincflow
