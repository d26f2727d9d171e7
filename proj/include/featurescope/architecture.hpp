#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "featurescope/model.hpp"

namespace fscope {

/// Scaled-down VGG layout: blocks of 3x3 convolutions followed by 2x2 max
/// pooling and dropout, then ReLU dense layers and a softmax head.
struct ArchitectureConfig {
  struct Block {
    std::size_t convCount;
    std::size_t channels;
  };
  std::vector<Block> blocks{{2, 32}, {2, 64}, {3, 128}, {3, 256}};
  std::vector<std::size_t> denseSizes{256, 128};
  Shape inputShape{78, 78, 2};
  std::size_t classCount = 2;
  double dropout = 0.25;
  Padding padding = Padding::Same;

  static constexpr std::size_t kMaxChannels = 256;

  void validate() const;
};

ModelSpec buildSpec(const ArchitectureConfig& config);

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases.
Model buildModel(const ArchitectureConfig& config, std::uint64_t seed);
Model buildDefaultModel(std::uint64_t seed);

}  // namespace fscope
