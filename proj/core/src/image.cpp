#include "cmseg/image.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <jpeglib.h>
#include <png.h>

namespace cmseg {

namespace {

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::vector<uint8_t>& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError("write failed for " + path.string());
}

void check_layout(const Image& image) {
  if (image.width <= 0 || image.height <= 0 || (image.channels != 1 && image.channels != 3) ||
      image.pixels.size() != static_cast<size_t>(image.width) * image.height * image.channels) {
    throw ImageIoError("image must be 1- or 3-channel with matching pixel buffer");
  }
}

struct PngReadState {
  const std::vector<uint8_t>* bytes;
  size_t pos;
};

void png_read_fn(png_structp png, png_bytep out, png_size_t count) {
  auto* state = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (state->pos + count > state->bytes->size()) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, state->bytes->data() + state->pos, count);
  state->pos += count;
}

void png_write_fn(png_structp png, png_bytep data, png_size_t count) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + count);
}

void png_flush_fn(png_structp) {}

Image decode_png(const std::vector<uint8_t>& bytes, const std::string& what) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ImageIoError(what + ": not a PNG");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw ImageIoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  Image image;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(what + ": corrupt PNG");
  }
  PngReadState state{&bytes, 0};
  png_set_read_fn(png, &state, png_read_fn);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  image.width = static_cast<int>(png_get_image_width(png, info));
  image.height = static_cast<int>(png_get_image_height(png, info));
  image.channels = static_cast<int>(png_get_channels(png, info));
  image.pixels.resize(static_cast<size_t>(image.width) * image.height * image.channels);
  rows.resize(static_cast<size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<size_t>(y)] = image.pixels.data() + static_cast<size_t>(y) * image.width * image.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

std::vector<uint8_t> encode_png(const Image& image) {
  check_layout(image);
  std::vector<uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw ImageIoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_write_fn, png_flush_fn);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, image.pixels.data() + static_cast<size_t>(y) * image.width * image.channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Image read_png(const std::filesystem::path& path) { return decode_png(read_file(path), path.string()); }

void write_png(const Image& image, const std::filesystem::path& path) { write_file(encode_png(image), path); }

std::vector<uint8_t> encode_jpeg(const Image& image, int quality) {
  check_layout(image);
  if (quality < 1 || quality > 100) throw ImageIoError("JPEG quality must be in 1..100");
  jpeg_compress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw ImageIoError(std::string("JPEG encoding failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = image.channels;
  cinfo.in_color_space = image.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const auto stride = static_cast<size_t>(image.width) * image.channels;
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(image.pixels.data() + cinfo.next_scanline * stride);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

Image decode_jpeg(const std::vector<uint8_t>& bytes) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  Image image;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageIoError(std::string("JPEG decoding failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.dct_method = JDCT_ISLOW;
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  image.width = static_cast<int>(cinfo.output_width);
  image.height = static_cast<int>(cinfo.output_height);
  image.channels = cinfo.output_components;
  image.pixels.resize(static_cast<size_t>(image.width) * image.height * image.channels);
  const auto stride = static_cast<size_t>(image.width) * image.channels;
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = image.pixels.data() + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return image;
}

Image read_jpeg(const std::filesystem::path& path) { return decode_jpeg(read_file(path)); }

void write_jpeg(const Image& image, const std::filesystem::path& path, int quality) {
  write_file(encode_jpeg(image, quality), path);
}

Image read_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, path.string());
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    try {
      return decode_jpeg(bytes);
    } catch (const ImageIoError& e) {
      throw ImageIoError(path.string() + ": " + e.what());
    }
  }
  throw ImageIoError(path.string() + ": unsupported image format");
}

Image to_rgb(const Image& image) {
  if (image.channels == 3) return image;
  Image out(image.width, image.height, 3);
  for (size_t i = 0; i < image.pixels.size(); ++i) {
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = image.pixels[i];
  }
  return out;
}

Image to_gray(const Image& image) {
  if (image.channels == 1) return image;
  Image out(image.width, image.height, 1);
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    const int r = image.pixels[3 * i];
    const int g = image.pixels[3 * i + 1];
    const int b = image.pixels[3 * i + 2];
    out.pixels[i] = static_cast<uint8_t>((77 * r + 150 * g + 29 * b + 128) >> 8);
  }
  return out;
}

Image resize(const Image& image, int width, int height, bool nearest) {
  if (width == image.width && height == image.height) return image;
  Image out(width, height, image.channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      // Pixel-centre alignment in 16.16 fixed point.
      const int64_t sx = ((2 * x + 1) * static_cast<int64_t>(image.width) << 16) / (2 * width) - (1 << 15);
      const int64_t sy = ((2 * y + 1) * static_cast<int64_t>(image.height) << 16) / (2 * height) - (1 << 15);
      if (nearest) {
        const int ix = std::clamp(static_cast<int>((sx + (1 << 15)) >> 16), 0, image.width - 1);
        const int iy = std::clamp(static_cast<int>((sy + (1 << 15)) >> 16), 0, image.height - 1);
        for (int c = 0; c < image.channels; ++c) out.at(x, y, c) = image.at(ix, iy, c);
        continue;
      }
      const int64_t cx = std::clamp<int64_t>(sx, 0, static_cast<int64_t>(image.width - 1) << 16);
      const int64_t cy = std::clamp<int64_t>(sy, 0, static_cast<int64_t>(image.height - 1) << 16);
      const int x0 = static_cast<int>(cx >> 16);
      const int y0 = static_cast<int>(cy >> 16);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const int y1 = std::min(y0 + 1, image.height - 1);
      const int64_t fx = cx & 0xFFFF;
      const int64_t fy = cy & 0xFFFF;
      for (int c = 0; c < image.channels; ++c) {
        const int64_t top = image.at(x0, y0, c) * (65536 - fx) + image.at(x1, y0, c) * fx;
        const int64_t bot = image.at(x0, y1, c) * (65536 - fx) + image.at(x1, y1, c) * fx;
        const int64_t v = (top * (65536 - fy) + bot * fy + (int64_t{1} << 31)) >> 32;
        out.at(x, y, c) = static_cast<uint8_t>(std::clamp<int64_t>(v, 0, 255));
      }
    }
  }
  return out;
}

Tensor image_to_tensor(const Image& rgb_in) {
  const Image rgb = to_rgb(rgb_in);
  Tensor t(Shape{1, 3, rgb.height, rgb.width});
  auto d = t.mutable_data();
  const size_t plane = static_cast<size_t>(rgb.width) * rgb.height;
  for (size_t i = 0; i < plane; ++i) {
    for (size_t c = 0; c < 3; ++c) d[c * plane + i] = static_cast<float>(rgb.pixels[3 * i + c]) / 255.0F;
  }
  return t;
}

Tensor mask_to_tensor(const Image& mask) {
  const Image gray = to_gray(mask);
  Tensor t(Shape{1, 1, gray.height, gray.width});
  auto d = t.mutable_data();
  for (size_t i = 0; i < gray.pixels.size(); ++i) d[i] = gray.pixels[i] > 127 ? 1.0F : 0.0F;
  return t;
}

Image tensor_to_mask(const Tensor& mask, int64_t n) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("tensor_to_mask expects (N,1,H,W)");
  const auto h = static_cast<int>(mask.dim(2));
  const auto w = static_cast<int>(mask.dim(3));
  Image out(w, h, 1);
  const auto d = mask.data().subspan(static_cast<size_t>(n) * w * h, static_cast<size_t>(w) * h);
  for (size_t i = 0; i < d.size(); ++i) out.pixels[i] = d[i] >= 0.5F ? 255 : 0;
  return out;
}

}  // namespace cmseg
