#include "featurescope/architecture.hpp"

#include <cmath>

namespace fscope {

void ArchitectureConfig::validate() const {
  if (blocks.empty()) throw Error("architecture needs at least one conv block");
  std::size_t previous = 0;
  for (const auto& block : blocks) {
    if (block.convCount == 0 || block.channels == 0) {
      throw Error("conv blocks need positive conv counts and channels");
    }
    if (block.channels < previous) throw Error("block channels must be nondecreasing");
    if (block.channels > kMaxChannels) {
      throw Error("block channels exceed the maximum of " + std::to_string(kMaxChannels));
    }
    previous = block.channels;
  }
  for (auto size : denseSizes) {
    if (size == 0) throw Error("dense sizes must be positive");
  }
  if (classCount != 2) throw Error("the classifier head must have exactly 2 outputs");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must be in [0,1)");
  if (inputShape.size() != 3) throw Error("input shape must be height x width x channels");
}

ModelSpec buildSpec(const ArchitectureConfig& config) {
  config.validate();
  ModelSpec spec;
  spec.inputShape = config.inputShape;
  std::size_t depth = config.inputShape[2];
  for (const auto& block : config.blocks) {
    for (std::size_t i = 0; i < block.convCount; ++i) {
      spec.layers.push_back(LayerSpec::conv(depth, block.channels, config.padding));
      spec.layers.push_back(LayerSpec::of(LayerKind::ReLU));
      depth = block.channels;
    }
    spec.layers.push_back(LayerSpec::of(LayerKind::MaxPool2x2));
    if (config.dropout > 0.0) spec.layers.push_back(LayerSpec::dropout(config.dropout));
  }
  spec.layers.push_back(LayerSpec::of(LayerKind::Flatten));
  // Width of the flattened tensor is only known after propagation.
  const auto shapes = spec.propagateShapes();
  std::size_t width = shapes.back()[0];
  for (auto size : config.denseSizes) {
    spec.layers.push_back(LayerSpec::dense(width, size));
    spec.layers.push_back(LayerSpec::of(LayerKind::ReLU));
    width = size;
  }
  spec.layers.push_back(LayerSpec::dense(width, config.classCount));
  spec.layers.push_back(LayerSpec::of(LayerKind::Softmax));
  spec.propagateShapes();
  return spec;
}

Model buildModel(const ArchitectureConfig& config, std::uint64_t seed) {
  Model model;
  model.spec = buildSpec(config);
  Rng rng(seed);
  for (const auto& layer : model.spec.layers) {
    LayerParams p;
    if (layer.kind == LayerKind::Conv3x3) {
      p.weights = NdTensor({3, 3, layer.inChannels, layer.outChannels});
      p.bias = NdTensor({layer.outChannels});
    } else if (layer.kind == LayerKind::Dense) {
      p.weights = NdTensor({layer.inChannels, layer.outChannels});
      p.bias = NdTensor({layer.outChannels});
    }
    if (!p.weights.empty()) {
      const double fanIn = static_cast<double>(p.weights.size() / p.bias.size());
      const double limit = std::sqrt(6.0 / fanIn);
      for (double& w : p.weights.values()) w = uniform(rng, -limit, limit);
    }
    model.params.perLayer.push_back(std::move(p));
  }
  return model;
}

Model buildDefaultModel(std::uint64_t seed) { return buildModel(ArchitectureConfig{}, seed); }

}  // namespace fscope
