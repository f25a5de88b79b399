#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dnbp {

/// 8-bit interleaved RGB raster, row-major from the top-left pixel.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* px(int x, int y) const { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  friend bool operator==(const Image&, const Image&) = default;
};

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace dnbp
