#include "traceform/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstring>

#include "traceform/errors.hpp"

namespace traceform {

Image crop(const Image& img, int x0, int y0, int x1, int y1) {
  if (x0 < 0 || y0 < 0 || x1 > img.width || y1 > img.height || x1 <= x0 || y1 <= y0) {
    throw DataError("crop window out of range or empty");
  }
  Image out(x1 - x0, y1 - y0);
  for (int y = y0; y < y1; ++y) {
    std::memcpy(out.at(0, y - y0), img.at(x0, y), static_cast<std::size_t>(x1 - x0) * 3);
  }
  return out;
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1, Rgb color) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, img.width);
  y1 = std::min(y1, img.height);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      std::uint8_t* p = img.at(x, y);
      p[0] = color.r;
      p[1] = color.g;
      p[2] = color.b;
    }
  }
}

void write_png(const Image& img, const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw DataError("failed to write " + path + ": " + image.message);
  }
}

Image read_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("failed to read " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("failed to decode " + path + ": " + image.message);
  }
  return out;
}

}  // namespace traceform
