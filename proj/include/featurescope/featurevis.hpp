#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "featurescope/model.hpp"
#include "featurescope/random.hpp"

namespace fscope {

// ---------------------------------------------------------------------------
// Fourier canvas

/// Two-channel image parameterized by full complex spectra on an N x N
/// support. Pixels are sigmoid(Re(ifft2(scale * spectrum))) with the
/// orthonormal inverse transform, cropped to the top-left
/// outputSize x outputSize block.
struct FourierCanvas {
  std::size_t support = 80;
  std::size_t outputSize = 78;
  std::size_t channels = 2;
  std::vector<std::complex<double>> spectrum;  // channel-major, each N*N row-major
  std::vector<double> frequencyScale;          // N*N

  static FourierCanvas zeros(std::size_t outputSize = 78, std::size_t channels = 2);
  static FourierCanvas random(Rng& rng, double stddev = 0.01, std::size_t outputSize = 78,
                              std::size_t channels = 2);
  std::size_t coefficientCount() const { return spectrum.size(); }
};

/// Even support strictly larger than n, so opposite edges do not touch.
std::size_t paddedSupport(std::size_t n);

/// 1 / max(|f|, 1/N) with f the 2-D spatial frequency in cycles per pixel.
std::vector<double> frequencyScaleTable(std::size_t n);

NdTensor decodeCanvas(const FourierCanvas& canvas);

/// Inverse of decodeCanvas for images strictly inside (0, 1). Pixels of the
/// padded border decode to 0.5.
FourierCanvas encodeImage(const NdTensor& image, std::size_t support = 0);

/// Chain rule from d objective / d pixel back to the spectrum. Entry k of the
/// result holds (d/d Re s_k) + i (d/d Im s_k).
std::vector<std::complex<double>> spectrumGradient(const FourierCanvas& canvas,
                                                   const NdTensor& pixelGradient);

// ---------------------------------------------------------------------------
// Transformation robustness

struct VisConfig {
  double learningRate = 0.05;
  std::size_t steps = 512;
  std::size_t jitterPx = 4;
  double scaleLo = 0.95;
  double scaleHi = 1.05;
  double rotateDeg = 5.0;
  std::uint64_t seed = 0;
  double initialStddev = 0.01;
  // Frequency penalties, off by default.
  double tvWeight = 0.0;
  double gradientBlurSigma = 0.0;
  // A channel that is zero everywhere on the current image has no gradient;
  // when set, such steps follow the gradient of its pre-ReLU values.
  bool reviveSilent = true;

  void validate() const;
  bool identityTransforms() const;
};

struct TransformParams {
  int dy = 0, dx = 0;
  double scale = 1.0;
  double rotateRad = 0.0;
};

TransformParams sampleTransform(const VisConfig& config, Rng& rng);

/// Fixed linear map from an image to its transformed copy. Each output pixel
/// is a bilinear combination of four input pixels; sample coordinates that
/// leave the image are reflected back inside.
class ImageWarp {
 public:
  ImageWarp(std::size_t height, std::size_t width, const TransformParams& params);

  NdTensor apply(const NdTensor& image) const;
  /// Adjoint: gradient with respect to the input given one for the output.
  NdTensor adjoint(const NdTensor& outputGradient) const;

 private:
  std::size_t h_, w_;
  std::vector<std::array<std::size_t, 4>> src_;
  std::vector<std::array<double, 4>> weight_;
};

/// Output pixel (y, x) samples the input at (y - dy, x - dx) after scaling and
/// rotating about the image centre.
NdTensor randomTransform(const NdTensor& image, const VisConfig& config, Rng& rng);

// ---------------------------------------------------------------------------
// Objectives

struct Objective {
  enum class Kind { Neuron, Channel, WeightedChannels, NeuronGroup };

  Kind kind = Kind::Channel;
  std::size_t layer = 1;
  std::size_t channel = 0;
  std::size_t y = 0, x = 0;
  std::vector<double> weights;  // per channel for WeightedChannels and NeuronGroup

  static Objective neuron(std::size_t layer, std::size_t channel, std::size_t y, std::size_t x);
  static Objective channelMean(std::size_t layer, std::size_t channel);
  static Objective weightedChannels(std::size_t layer, std::vector<double> weights);
  static Objective neuronGroup(std::size_t layer, std::vector<double> direction);

  void validate(const ModelSpec& spec) const;
  /// Value at a feature-layer activation (H x W x C, or a flat vector for
  /// dense layers).
  double value(const NdTensor& activation) const;
  NdTensor gradient(const NdTensor& activation) const;
  std::string describe() const;
};

const char* objectiveKindName(Objective::Kind kind);

/// Mean activation of one channel over all spatial positions.
double meanChannelActivation(const NdTensor& activation, std::size_t channel);

/// Objective value of an image with no transform applied.
double evaluateObjective(const Model& model, const Objective& objective, const NdTensor& image);

// ---------------------------------------------------------------------------
// Optimization

struct FeatureImage {
  NdTensor pixels;
  Objective objective;
  std::size_t steps = 0;
  std::vector<double> objectiveHistory;  // per step, on the transformed image
  double saturationFraction = 0.0;
  double finalObjective = 0.0;           // untransformed final image
  FourierCanvas canvas;
};

/// Share of values outside [0.02, 0.98].
double saturationFraction(const NdTensor& image);

/// Objective minus the optional total-variation penalty, and its pixel
/// gradient, for one transformed image.
double objectiveWithGradient(const Model& model, const Objective& objective, const VisConfig& config,
                             const NdTensor& image, NdTensor& pixelGradient);

/// Adam ascent on the canvas spectrum. Throws with the step index if the
/// objective becomes non-finite.
FeatureImage optimize(const Model& model, const Objective& objective, const VisConfig& config);
FeatureImage optimizeFrom(const Model& model, const Objective& objective, const VisConfig& config,
                          FourierCanvas canvas);

struct GuardAdvice {
  bool flagged = false;
  bool saturated = false;
  bool plateaued = false;
  std::string reason;
};

/// Flags a run whose image is more than 30% saturated or whose objective
/// gained less than 1% over the final fifth of its steps.
GuardAdvice overOptimizationGuard(const std::vector<double>& history, double saturation);

struct LayerAtlas {
  static constexpr std::size_t kEmptyCell = static_cast<std::size_t>(-1);

  std::size_t layer = 0;
  std::vector<std::size_t> channels;  // channel of each image
  std::vector<FeatureImage> images;
  std::vector<std::size_t> cells;     // rows*cols entries: index into images or kEmptyCell
  std::size_t rows = 0, cols = 0;
};

/// One channel image per requested channel (all channels when empty), all
/// with the same seed. With `similarityOrder`, channels are laid out by a
/// grid-mapped t-SNE of their flattened feature tensors.
LayerAtlas generateLayerAtlas(const Model& model, std::size_t layer, const VisConfig& config,
                              std::vector<std::size_t> channels = {}, bool similarityOrder = false);

/// Fraction of atlas cells with at least one of their k nearest neighbours
/// (in flattened-activation space) among the 8 adjacent cells.
double atlasAdjacencyScore(const LayerAtlas& atlas, const Model& model, std::size_t k = 3);

}  // namespace fscope
