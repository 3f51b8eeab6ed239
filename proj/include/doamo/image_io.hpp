#ifndef DOAMO_IMAGE_IO_HPP_
#define DOAMO_IMAGE_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <vector>

#include "doamo/tensor.hpp"

namespace doamo {

// 8-bit interleaved raster (row-major, channels fastest).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// PNG or JPEG, chosen by file signature. Gray and RGB are kept as-is;
// anything with alpha or a palette is converted to RGB.
Image8 read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

struct ImageSize {
  int width = 0;
  int height = 0;
};
// Reads only the header.
ImageSize image_dimensions(const std::filesystem::path& path);

// (C, H, W) with values in [0, 1].
Tensor to_tensor(const Image8& image);
// Values are clamped to [0, 1] and rounded; C must be 1 or 3.
Image8 from_tensor(const Tensor& chw);

// Bilinear resampling of a (C, H, W) tensor with pixel-centre alignment.
Tensor resize_bilinear(const Tensor& chw, int out_height, int out_width);

}  // namespace doamo

#endif  // DOAMO_IMAGE_IO_HPP_
