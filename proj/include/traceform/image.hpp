#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace traceform {

/// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool empty() const { return width <= 0 || height <= 0; }
  friend bool operator==(const Image&, const Image&) = default;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Sub-image [x0, x1) x [y0, y1). Throws DataError on an empty or out-of-range window.
Image crop(const Image& img, int x0, int y0, int x1, int y1);

void fill_rect(Image& img, int x0, int y0, int x1, int y1, Rgb color);

void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

}  // namespace traceform
