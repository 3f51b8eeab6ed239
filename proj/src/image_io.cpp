#include "doamo/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

#include <jpeglib.h>
#include <png.h>

namespace doamo {

namespace {

enum class Format { kPng, kJpeg };

Format sniff(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  if (in.gcount() >= 8 && png_sig_cmp(sig, 0, 8) == 0) return Format::kPng;
  if (in.gcount() >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return Format::kJpeg;
  throw std::runtime_error("unrecognised image format: " + path.string());
}

struct FileCloser {
  void operator()(FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Decodes either the header only or the full image.
Image8 read_jpeg(const std::filesystem::path& path, bool header_only) {
  FilePtr f = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  Image8 img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("JPEG decode failed for " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  img.width = static_cast<int>(cinfo.image_width);
  img.height = static_cast<int>(cinfo.image_height);
  if (header_only) {
    jpeg_destroy_decompress(&cinfo);
    return img;
  }
  if (cinfo.jpeg_color_space != JCS_GRAYSCALE) cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.channels = static_cast<int>(cinfo.output_components);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() +
                   static_cast<std::size_t>(cinfo.output_scanline) * img.width * img.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

Image8 read_png(const std::filesystem::path& path, bool header_only) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("PNG decode failed for " + path.string() + ": " + image.message);
  }
  Image8 img;
  img.width = static_cast<int>(image.width);
  img.height = static_cast<int>(image.height);
  if (header_only) {
    png_image_free(&image);
    return img;
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0 &&
                    (image.format & PNG_FORMAT_FLAG_ALPHA) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  img.channels = gray ? 1 : 3;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("PNG decode failed for " + path.string() + ": " + msg);
  }
  return img;
}

}  // namespace

Image8 read_image(const std::filesystem::path& path) {
  return sniff(path) == Format::kPng ? read_png(path, false) : read_jpeg(path, false);
}

ImageSize image_dimensions(const std::filesystem::path& path) {
  Image8 h = sniff(path) == Format::kPng ? read_png(path, true) : read_jpeg(path, true);
  return {h.width, h.height};
}

void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw std::invalid_argument("write_png: channels must be 1 or 3");
  }
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
    throw std::invalid_argument("write_png: pixel buffer size mismatch");
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("PNG encode failed for " + path.string() + ": " + image.message);
  }
}

Tensor to_tensor(const Image8& img) {
  Tensor t({img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) t.at(c, y, x) = img.at(y, x, c) / 255.0;
  return t;
}

Image8 from_tensor(const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) {
    throw std::invalid_argument("from_tensor: expected (1|3, H, W), got " + shape_str(chw.shape()));
  }
  Image8 img{chw.dim(2), chw.dim(1), chw.dim(0), {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double v = std::clamp(chw.at(c, y, x), 0.0, 1.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
  if (chw.rank() != 3 || out_h < 1 || out_w < 1) {
    throw std::invalid_argument("resize_bilinear: bad shape");
  }
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (h == out_h && w == out_w) return chw;
  Tensor out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        out.at(ch, y, x) = (1 - ty) * ((1 - tx) * chw.at(ch, y0, x0) + tx * chw.at(ch, y0, x1)) +
                           ty * ((1 - tx) * chw.at(ch, y1, x0) + tx * chw.at(ch, y1, x1));
      }
    }
  }
  return out;
}

}  // namespace doamo
