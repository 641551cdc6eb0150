#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tcsa {

// 8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Reads 8-bit PNG (gray / RGB / RGBA, alpha dropped) or binary PPM/PGM.
// Throws std::runtime_error naming the file on any decoding problem.
Image load_image(const std::string& path);

// 8-bit binary PGM; pixel value = class index (or scaled probability).
void save_pgm(const std::string& path, std::size_t width, std::size_t height,
              const std::vector<std::uint8_t>& pixels);

Image resize_nearest(const Image& src, std::size_t width, std::size_t height);

// Grayscale replicated to 3 channels; RGB passes through.
Image to_rgb(const Image& src);

}  // namespace tcsa
