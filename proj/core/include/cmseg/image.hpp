#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cmseg/tensor.hpp"

namespace cmseg {

/// Interleaved 8-bit image (1 or 3 channels), row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c, uint8_t fill = 0)
      : width(w), height(h), channels(c),
        pixels(static_cast<size_t>(w) * static_cast<size_t>(h) * static_cast<size_t>(c), fill) {}

  bool empty() const { return pixels.empty(); }
  uint8_t& at(int x, int y, int c = 0) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

class ImageIoError : public Error {
 public:
  using Error::Error;
};

Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);
std::vector<uint8_t> encode_png(const Image& image);

std::vector<uint8_t> encode_jpeg(const Image& image, int quality);
Image decode_jpeg(const std::vector<uint8_t>& bytes);
Image read_jpeg(const std::filesystem::path& path);
void write_jpeg(const Image& image, const std::filesystem::path& path, int quality);

/// Reads PNG or JPEG, chosen by file signature.
Image read_image(const std::filesystem::path& path);

Image to_rgb(const Image& image);
Image to_gray(const Image& image);

/// Bilinear resize (nearest for masks via `nearest`).
Image resize(const Image& image, int width, int height, bool nearest = false);

/// RGB image -> (1, 3, H, W) tensor in [0, 1].
Tensor image_to_tensor(const Image& rgb);
/// Single-channel mask (any nonzero is foreground) -> (1, 1, H, W) in {0, 1}.
Tensor mask_to_tensor(const Image& mask);
/// (N, 1, H, W) binary tensor, batch element n -> 8-bit mask {0, 255}.
Image tensor_to_mask(const Tensor& mask, int64_t n = 0);

}  // namespace cmseg
