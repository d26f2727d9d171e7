#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "featurescope/tensor.hpp"

namespace fscope::io {

struct Gray16Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

struct Rgb8Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved RGB
};

void writePng(const std::filesystem::path& path, const Gray16Image& image);
void writePng(const std::filesystem::path& path, const Rgb8Image& image);
Gray16Image readGray16Png(const std::filesystem::path& path);
Rgb8Image readRgb8Png(const std::filesystem::path& path);

/// Quantizes one channel of an H x W x C tensor in [0,1] to 16 bits.
Gray16Image channelToGray16(const NdTensor& image, std::size_t channel);

/// Red/green false-colour composite of a two-channel image in [0,1]
/// (channel 0 -> red, channel 1 -> green).
Rgb8Image falseColour(const NdTensor& image);

/// Converts an H x W x 3 tensor in [0,1] to 8-bit RGB.
Rgb8Image rgbTensorToImage(const NdTensor& rgb);

}  // namespace fscope::io
