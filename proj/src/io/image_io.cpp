#include "featurescope/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace fscope::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr openFile(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("cannot open " + path.string());
  return f;
}

// libpng reports errors through longjmp; these helpers keep every object with
// a destructor outside the frames that call setjmp.
bool writeRowsRaw(std::FILE* file, std::size_t width, std::size_t height, int colourType,
                  int bitDepth, const std::uint8_t* bytes, std::size_t rowBytes) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bitDepth, colourType, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bitDepth == 16) png_set_swap(png);  // buffers are little-endian
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes + y * rowBytes));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct ReadHeader {
  png_uint_32 width = 0, height = 0;
  int colourType = 0, bitDepth = 0;
};

// Two-phase read: the caller sizes the buffer from the header, then rows are
// decoded into it.
bool readRowsRaw(std::FILE* file, ReadHeader& header, std::vector<std::uint8_t>* bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  header.width = png_get_image_width(png, info);
  header.height = png_get_image_height(png, info);
  header.colourType = png_get_color_type(png, info);
  header.bitDepth = png_get_bit_depth(png, info);
  if (bytes) {
    if (header.bitDepth == 16) png_set_swap(png);
    png_read_update_info(png, info);
    const std::size_t rowBytes = png_get_rowbytes(png, info);
    if (bytes->size() == rowBytes * header.height) {
      for (png_uint_32 y = 0; y < header.height; ++y) {
        png_read_row(png, bytes->data() + y * rowBytes, nullptr);
      }
      png_read_end(png, nullptr);
    } else {
      png_destroy_read_struct(&png, &info, nullptr);
      return false;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

void writeRows(const std::filesystem::path& path, std::size_t width, std::size_t height,
               int colourType, int bitDepth, const std::uint8_t* bytes, std::size_t rowBytes) {
  auto file = openFile(path, "wb");
  if (!writeRowsRaw(file.get(), width, height, colourType, bitDepth, bytes, rowBytes)) {
    throw Error("png: failed writing " + path.string());
  }
}

struct ReadResult {
  std::size_t width, height;
  int colourType, bitDepth;
  std::vector<std::uint8_t> bytes;
  std::size_t rowBytes;
};

ReadResult readRows(const std::filesystem::path& path, int expectColour, int expectDepth,
                    std::size_t bytesPerPixel) {
  ReadHeader header;
  {
    auto file = openFile(path, "rb");
    if (!readRowsRaw(file.get(), header, nullptr)) throw Error("png: cannot read " + path.string());
  }
  if (header.colourType != expectColour || header.bitDepth != expectDepth) {
    throw Error(path.string() + ": unexpected png pixel format");
  }
  ReadResult r{header.width, header.height, header.colourType, header.bitDepth, {},
               header.width * bytesPerPixel};
  r.bytes.resize(r.rowBytes * r.height);
  auto file = openFile(path, "rb");
  if (!readRowsRaw(file.get(), header, &r.bytes)) throw Error("png: cannot decode " + path.string());
  return r;
}

std::uint8_t to8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void writePng(const std::filesystem::path& path, const Gray16Image& image) {
  if (image.pixels.size() != image.width * image.height) throw Error("gray16 size mismatch");
  writeRows(path, image.width, image.height, PNG_COLOR_TYPE_GRAY, 16,
            reinterpret_cast<const std::uint8_t*>(image.pixels.data()), image.width * 2);
}

void writePng(const std::filesystem::path& path, const Rgb8Image& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw Error("rgb8 size mismatch");
  writeRows(path, image.width, image.height, PNG_COLOR_TYPE_RGB, 8, image.pixels.data(),
            image.width * 3);
}

Gray16Image readGray16Png(const std::filesystem::path& path) {
  auto r = readRows(path, PNG_COLOR_TYPE_GRAY, 16, 2);
  Gray16Image image{r.width, r.height, std::vector<std::uint16_t>(r.width * r.height)};
  for (std::size_t y = 0; y < r.height; ++y) {
    std::copy_n(reinterpret_cast<const std::uint16_t*>(r.bytes.data() + y * r.rowBytes), r.width,
                image.pixels.data() + y * r.width);
  }
  return image;
}

Rgb8Image readRgb8Png(const std::filesystem::path& path) {
  auto r = readRows(path, PNG_COLOR_TYPE_RGB, 8, 3);
  Rgb8Image image{r.width, r.height, std::vector<std::uint8_t>(r.width * r.height * 3)};
  for (std::size_t y = 0; y < r.height; ++y) {
    std::copy_n(r.bytes.data() + y * r.rowBytes, r.width * 3, image.pixels.data() + y * r.width * 3);
  }
  return image;
}

Gray16Image channelToGray16(const NdTensor& image, std::size_t channel) {
  if (image.rank() != 3 || channel >= image.dim(2)) throw ShapeError("channelToGray16: bad channel");
  Gray16Image out{image.dim(1), image.dim(0), {}};
  out.pixels.resize(out.width * out.height);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      const double v = std::clamp(image.at(y, x, channel), 0.0, 1.0);
      out.pixels[y * out.width + x] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
  }
  return out;
}

Rgb8Image falseColour(const NdTensor& image) {
  if (image.rank() != 3 || image.dim(2) != 2) throw ShapeError("falseColour expects H x W x 2");
  Rgb8Image out{image.dim(1), image.dim(0), {}};
  out.pixels.resize(out.width * out.height * 3, 0);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      const std::size_t o = (y * out.width + x) * 3;
      out.pixels[o] = to8(image.at(y, x, 0));
      out.pixels[o + 1] = to8(image.at(y, x, 1));
    }
  }
  return out;
}

Rgb8Image rgbTensorToImage(const NdTensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(2) != 3) throw ShapeError("rgbTensorToImage expects H x W x 3");
  Rgb8Image out{rgb.dim(1), rgb.dim(0), std::vector<std::uint8_t>(rgb.size())};
  for (std::size_t i = 0; i < rgb.size(); ++i) out.pixels[i] = to8(rgb[i]);
  return out;
}

}  // namespace fscope::io
