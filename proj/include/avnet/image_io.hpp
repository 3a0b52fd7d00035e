// 8-bit RGB images and PNG reading/writing through libpng.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace avnet {

class ImageIOError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, Rgb fill = {0, 0, 0})
      : width(w), height(h), pixels(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i) set(i, fill);
  }

  Rgb get(std::size_t i) const { return {pixels[3 * i], pixels[3 * i + 1], pixels[3 * i + 2]}; }
  Rgb get(std::size_t x, std::size_t y) const { return get(y * width + x); }
  void set(std::size_t i, Rgb c) {
    pixels[3 * i] = c[0];
    pixels[3 * i + 1] = c[1];
    pixels[3 * i + 2] = c[2];
  }
  void set(std::size_t x, std::size_t y, Rgb c) { set(y * width + x, c); }

  bool operator==(const RgbImage&) const = default;
};

inline RgbImage read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ImageIOError("image file not found: " + path.string());
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ImageIOError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = image.width;
  out.height = image.height;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ImageIOError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  if (img.pixels.size() != img.width * img.height * 3) {
    throw ImageIOError("image buffer does not match its dimensions");
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw ImageIOError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace avnet
