#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace cmtnet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded raster at native resolution, interleaved, values scaled to [0,1].
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  int bit_depth = 8;
  std::vector<float> values;

  float at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Reads an 8- or 16-bit PNG. Palettes are expanded and alpha is dropped.
Raster read_png(const std::filesystem::path& path);

/// Writes 8-bit PNG; `pixels` is interleaved with `channels` (1 or 3) samples per pixel.
void write_png(const std::filesystem::path& path, int width, int height, int channels,
               std::span<const std::uint8_t> pixels);

}  // namespace cmtnet
