#pragma once

#include <cstdint>
#include <vector>

#include "featurescope/tensor.hpp"

// Differentiable building blocks. Spatial tensors are H x W x C, kernels are
// 3 x 3 x Cin x Cout, dense weights are In x Out (y = x W + b).
namespace fscope::ops {

enum class Padding { Same, Valid };

NdTensor conv2dForward(const NdTensor& input, const NdTensor& weights,
                       const NdTensor& bias, Padding padding);

struct Conv2dGradients {
  NdTensor input;  // empty when not requested
  NdTensor weights;
  NdTensor bias;
};

Conv2dGradients conv2dBackward(const NdTensor& input, const NdTensor& weights,
                               const NdTensor& gradOutput, Padding padding,
                               bool needInputGrad);

struct PoolResult {
  NdTensor output;
  // Flat input index of the winning element for every output element.
  std::vector<std::uint32_t> argmax;
};

/// 2x2 max pooling with stride 2. Odd extents produce partial windows
/// (ceil semantics); ties go to the first element in row-major order.
PoolResult maxPool2x2Forward(const NdTensor& input);
NdTensor maxPool2x2Backward(const NdTensor& gradOutput,
                            const std::vector<std::uint32_t>& argmax,
                            const Shape& inputShape);

NdTensor denseForward(const NdTensor& input, const NdTensor& weights,
                      const NdTensor& bias);

struct DenseGradients {
  NdTensor input;
  NdTensor weights;
  NdTensor bias;
};

DenseGradients denseBackward(const NdTensor& input, const NdTensor& weights,
                             const NdTensor& gradOutput, bool needInputGrad);

NdTensor reluForward(const NdTensor& input);
/// Passes gradient where the forward input was strictly positive.
NdTensor reluBackward(const NdTensor& input, const NdTensor& gradOutput);

NdTensor softmaxForward(const NdTensor& logits);

/// Inverted dropout: kept elements are scaled by 1/(1-rate). `mask` holds the
/// multiplier applied to every element (0 or 1/(1-rate)).
NdTensor applyMask(const NdTensor& input, const std::vector<double>& mask);

Shape conv2dOutputShape(const Shape& input, std::size_t outChannels, Padding padding);
Shape maxPool2x2OutputShape(const Shape& input);

}  // namespace fscope::ops
