#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace hiercomp {

class PngError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit RGB image, planar [3 x height x width].
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> planar;
};

inline Image8 read_png_rgb(const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw PngError("png: " + path + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> interleaved(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, interleaved.data(), 0, nullptr)) {
    png_image_free(&img);
    throw PngError("png: " + path + ": " + img.message);
  }
  Image8 out{img.width, img.height, std::vector<std::uint8_t>(interleaved.size())};
  const std::size_t hw = out.width * out.height;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) out.planar[c * hw + p] = interleaved[p * 3 + c];
  return out;
}

inline void write_png_rgb(const std::string& path, const Image8& image) {
  const std::size_t hw = image.width * image.height;
  if (image.planar.size() != 3 * hw) throw PngError("png: planar buffer does not match dimensions");
  std::vector<std::uint8_t> interleaved(3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) interleaved[p * 3 + c] = image.planar[c * hw + p];
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, interleaved.data(), 0, nullptr))
    throw PngError("png: " + path + ": " + img.message);
}

// [3 x H x W] floats in [0,1], clamped and rounded to bytes.
inline Image8 to_image8(const Tensor<float>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("to_image8: expected [3xHxW], got " + to_string(chw.shape()));
  Image8 out{chw.dim(2), chw.dim(1), std::vector<std::uint8_t>(chw.size())};
  for (std::size_t i = 0; i < chw.size(); ++i) {
    const float v = std::clamp(chw[i], 0.0f, 1.0f);
    out.planar[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

inline void write_png(const std::string& path, const Tensor<float>& chw) { write_png_rgb(path, to_image8(chw)); }

}  // namespace hiercomp
