#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "featurescope/layers.hpp"
#include "featurescope/random.hpp"
#include "featurescope/tensor.hpp"

namespace fscope {

using ops::Padding;

enum class LayerKind : std::uint8_t {
  Conv3x3 = 0,
  MaxPool2x2 = 1,
  Dense = 2,
  ReLU = 3,
  Softmax = 4,
  Flatten = 5,
  Dropout = 6,
};

const char* layerKindName(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t inChannels = 0;   // conv depth or dense input width
  std::size_t outChannels = 0;  // conv filters or dense output width
  Padding padding = Padding::Same;
  double rate = 0.0;            // dropout probability

  static LayerSpec conv(std::size_t in, std::size_t out, Padding p = Padding::Same) {
    return {LayerKind::Conv3x3, in, out, p, 0.0};
  }
  static LayerSpec dense(std::size_t in, std::size_t out) {
    return {LayerKind::Dense, in, out, Padding::Same, 0.0};
  }
  static LayerSpec of(LayerKind kind) { return {kind, 0, 0, Padding::Same, 0.0}; }
  static LayerSpec dropout(double rate) {
    return {LayerKind::Dropout, 0, 0, Padding::Same, rate};
  }

  bool hasParameters() const {
    return kind == LayerKind::Conv3x3 || kind == LayerKind::Dense;
  }
  bool operator==(const LayerSpec&) const = default;
};

/// A named point in the network whose activations can be inspected.
/// Index 0 is the input image; then every conv and dense layer in order,
/// taken after its ReLU when one follows.
struct FeatureLayer {
  std::string name;
  std::optional<std::size_t> op;  // producing op, none for the input
  Shape shape;
};

struct ModelSpec {
  Shape inputShape;
  std::vector<LayerSpec> layers;
  // Pooling rounds odd extents up; recorded so shapes are reproducible.
  bool poolCeil = true;

  /// Output shape of every op; throws naming the first op that cannot accept
  /// its input.
  std::vector<Shape> propagateShapes() const;
  std::vector<FeatureLayer> featureLayers() const;
  /// Op producing the pre-softmax logits.
  std::size_t logitsOp() const;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerParams {
  NdTensor weights;
  NdTensor bias;

  bool operator==(const LayerParams&) const = default;
};

struct ModelParameters {
  std::vector<LayerParams> perLayer;  // aligned with ModelSpec::layers

  std::size_t paramCount() const;
  bool operator==(const ModelParameters&) const = default;
};

using ParameterGradients = ModelParameters;

struct Model {
  ModelSpec spec;
  ModelParameters params;

  /// Checks parameter tensors against the spec.
  void validate() const;
  ModelParameters zeroParameters() const;
};

struct ForwardOptions {
  bool captureAll = false;
  bool training = false;        // enables dropout, requires rng
  Rng* rng = nullptr;
  std::optional<std::size_t> stopAfterOp;
};

struct ForwardTrace {
  NdTensor input;
  std::vector<NdTensor> opOutputs;  // every op's output when captured
  std::vector<std::vector<std::uint32_t>> poolArgmax;
  std::vector<std::vector<double>> dropoutMasks;
  NdTensor logits;         // empty if the pass stopped early
  NdTensor probabilities;  // empty if the pass stopped early
  std::size_t lastOp = 0;
  bool captured = false;
  bool training = false;

  const NdTensor& opOutput(std::size_t op) const;
  /// Activation at a FeatureLayer index (post-nonlinearity).
  const NdTensor& featureActivation(const ModelSpec& spec, std::size_t layer) const;
};

ForwardTrace forward(const Model& model, const NdTensor& image,
                     const ForwardOptions& options = {});

/// Forward pass that stops at a feature layer and keeps every intermediate.
ForwardTrace forwardToLayer(const Model& model, const NdTensor& image, std::size_t layer);

/// Gradient of a scalar loss with respect to every parameter, given the loss
/// gradient at the logits.
ParameterGradients backwardToParams(const Model& model, const ForwardTrace& trace,
                                    const NdTensor& lossGradAtLogits);

/// Gradient of a scalar objective with respect to the input image, given the
/// objective's gradient at a feature layer.
NdTensor backwardToInput(const Model& model, const ForwardTrace& trace, std::size_t layer,
                         const NdTensor& gradAtLayer);

/// Shared reverse sweep from `op` down to the input. Accumulates parameter
/// gradients into `params` when non-null; returns the input gradient when
/// requested.
NdTensor backwardFrom(const Model& model, const ForwardTrace& trace, std::size_t op,
                      NdTensor grad, ParameterGradients* params, bool needInputGrad);

}  // namespace fscope
