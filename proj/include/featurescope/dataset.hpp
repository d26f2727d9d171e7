#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "featurescope/tensor.hpp"

namespace fscope {

enum class CellClass : std::uint8_t { Lymphocyte = 0, Neutrophil = 1 };
enum class Split : std::uint8_t { Unassigned = 0, Train = 1, Val = 2, Test = 3 };

const char* cellClassName(CellClass label);
const char* splitName(Split split);
CellClass parseCellClass(const std::string& name);
Split parseSplit(const std::string& name);

/// Filtered two-channel image: channel 0 is cytoplasm (red), channel 1 is
/// nucleus (green). Values lie in [0,1] with each nonempty channel peaking at 1.
struct CellImage {
  std::string id;
  NdTensor pixels;
  CellClass label = CellClass::Lymphocyte;
  Split split = Split::Unassigned;
};

struct LabeledImageSet {
  std::vector<CellImage> images;

  std::size_t size() const { return images.size(); }
  std::vector<std::size_t> indicesOf(Split split) const;
  std::vector<std::size_t> allIndices() const;
  std::size_t countOf(CellClass label, std::optional<Split> split = std::nullopt) const;
};

// ---------------------------------------------------------------------------
// Filtering

enum class RejectReason : std::uint8_t {
  EmptyChannel,
  SaturatedBorder,
  CentroidDistance,
  WeakChannel,
};

const char* rejectReasonName(RejectReason reason);

struct FilterConfig {
  double thresholdFraction = 0.2;
  std::size_t minNonzeroPixels = 30;
  double maxCentroidDistance = 15.0;
  double centroidBlurSigma = 2.0;
  // Raw detector value treated as saturated when it appears on the border.
  double saturationValue = 65535.0;
};

struct FilterOutcome {
  std::optional<NdTensor> pixels;
  std::optional<RejectReason> reason;
  std::string detail;

  bool accepted() const { return pixels.has_value(); }
};

/// Removes each channel's background (values below thresholdFraction of the
/// channel maximum), runs the quality checks, then max-normalizes each channel.
FilterOutcome filterImage(const NdTensor& raw, const FilterConfig& config = {});

/// Intensity-weighted centroid (y, x) of a Gaussian-blurred channel.
std::array<double, 2> blurredCentroid(const NdTensor& image, std::size_t channel, double sigma);

// ---------------------------------------------------------------------------
// Synthetic generation

struct MorphologyParams {
  std::size_t lobesMin = 1;
  std::size_t lobesMax = 1;
  double lobeRadiusMin = 8.0;
  double lobeRadiusMax = 11.0;
  double lobeSpreadMin = 0.0;  // lobe centre distance from the cell centre
  double lobeSpreadMax = 0.0;
  double cellRadiusMin = 11.0;  // cytoplasm extent
  double cellRadiusMax = 14.0;
  double cytoplasmIntensityMin = 900.0;
  double cytoplasmIntensityMax = 1800.0;
  double nucleusIntensityMin = 1500.0;
  double nucleusIntensityMax = 3000.0;

  static MorphologyParams lymphocyte();
  static MorphologyParams neutrophil();
};

struct SynthConfig {
  std::size_t lymphocyteCount = 2000;
  std::size_t neutrophilCount = 2000;
  std::uint64_t seed = 0;
  std::size_t imageSize = 78;
  MorphologyParams lymphocyte = MorphologyParams::lymphocyte();
  MorphologyParams neutrophil = MorphologyParams::neutrophil();
  double backgroundLevel = 120.0;
  double noiseLevel = 60.0;        // additive noise standard deviation
  double centreJitter = 4.0;
  double defectRate = 0.03;        // fraction of raw captures with a defect
  FilterConfig filter;

  void validate() const;
};

struct Rejection {
  std::string id;
  CellClass label;
  RejectReason reason;
};

struct SynthResult {
  LabeledImageSet set;
  std::vector<Rejection> rejections;
};

struct RawCellInfo {
  std::size_t nucleusPixels = 0;  // pixels covered by the nucleus shape
  bool defective = false;
};

/// Renders one raw capture in detector units.
NdTensor renderRawCell(CellClass label, const SynthConfig& config, std::uint64_t captureSeed,
                       RawCellInfo* info = nullptr);

/// Generates raw captures per class until the requested number pass the filter.
SynthResult generateSyntheticSet(const SynthConfig& config);

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

/// Stratified split: each class is shuffled independently and cut by ratio.
void splitDataset(LabeledImageSet& set, const SplitRatios& ratios, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset directory: images/<id>_ch0.png, images/<id>_ch1.png (16-bit
// grayscale) and manifest.jsonl with one {id,label,split,rejectionReason?}
// object per line.

void writeDatasetDirectory(const std::filesystem::path& dir, const LabeledImageSet& set,
                           const std::vector<Rejection>& rejections);
LabeledImageSet readDatasetDirectory(const std::filesystem::path& dir,
                                     std::vector<Rejection>* rejections = nullptr);

}  // namespace fscope
