#include "featurescope/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace fscope::ops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void requireRank(const NdTensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) +
                     ", got shape " + shapeToString(t.shape()));
  }
}

void checkConvShapes(const NdTensor& input, const NdTensor& weights) {
  requireRank(input, 3, "conv2d input");
  requireRank(weights, 4, "conv2d weights");
  if (weights.dim(0) != 3 || weights.dim(1) != 3) {
    throw ShapeError("conv2d kernels must be 3x3, got " + shapeToString(weights.shape()));
  }
  if (weights.dim(2) != input.dim(2)) {
    throw ShapeError("conv2d input " + shapeToString(input.shape()) + " does not match kernel " +
                     shapeToString(weights.shape()));
  }
}

struct ConvGeometry {
  std::size_t inH, inW, inC, outH, outW, pad;
};

ConvGeometry geometry(const Shape& in, Padding padding) {
  ConvGeometry g{in[0], in[1], in[2], 0, 0, padding == Padding::Same ? 1u : 0u};
  if (padding == Padding::Same) {
    g.outH = g.inH;
    g.outW = g.inW;
  } else {
    if (g.inH < 3 || g.inW < 3) {
      throw ShapeError("valid conv2d needs spatial extent >= 3, got " + shapeToString(in));
    }
    g.outH = g.inH - 2;
    g.outW = g.inW - 2;
  }
  return g;
}

// Patch matrix: one row per output position, columns ordered (ky, kx, ci) to
// match the row-major kernel layout.
AlignedVector im2col(const NdTensor& input, const ConvGeometry& g) {
  const std::size_t cols = 9 * g.inC;
  AlignedVector col(g.outH * g.outW * cols, 0.0);
  const double* src = input.data();
  for (std::size_t oy = 0; oy < g.outH; ++oy) {
    for (std::size_t ox = 0; ox < g.outW; ++ox) {
      double* row = col.data() + (oy * g.outW + ox) * cols;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= static_cast<long>(g.inH)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long ix = static_cast<long>(ox + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= static_cast<long>(g.inW)) continue;
          std::copy_n(src + (iy * g.inW + ix) * g.inC, g.inC, row + (ky * 3 + kx) * g.inC);
        }
      }
    }
  }
  return col;
}

void col2im(const AlignedVector& col, const ConvGeometry& g, NdTensor& grad) {
  const std::size_t cols = 9 * g.inC;
  double* dst = grad.data();
  for (std::size_t oy = 0; oy < g.outH; ++oy) {
    for (std::size_t ox = 0; ox < g.outW; ++ox) {
      const double* row = col.data() + (oy * g.outW + ox) * cols;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= static_cast<long>(g.inH)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long ix = static_cast<long>(ox + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= static_cast<long>(g.inW)) continue;
          double* d = dst + (iy * g.inW + ix) * g.inC;
          const double* s = row + (ky * 3 + kx) * g.inC;
          for (std::size_t c = 0; c < g.inC; ++c) d[c] += s[c];
        }
      }
    }
  }
}

}  // namespace

Shape conv2dOutputShape(const Shape& input, std::size_t outChannels, Padding padding) {
  if (input.size() != 3) throw ShapeError("conv2d expects rank-3 input, got " + shapeToString(input));
  const auto g = geometry(input, padding);
  return {g.outH, g.outW, outChannels};
}

Shape maxPool2x2OutputShape(const Shape& input) {
  if (input.size() != 3) throw ShapeError("max pool expects rank-3 input, got " + shapeToString(input));
  if (input[0] == 0 || input[1] == 0) throw ShapeError("max pool on empty extent " + shapeToString(input));
  return {(input[0] + 1) / 2, (input[1] + 1) / 2, input[2]};
}

NdTensor conv2dForward(const NdTensor& input, const NdTensor& weights,
                       const NdTensor& bias, Padding padding) {
  checkConvShapes(input, weights);
  const std::size_t cout = weights.dim(3);
  if (bias.size() != cout) {
    throw ShapeError("conv2d bias has " + std::to_string(bias.size()) + " values for " +
                     std::to_string(cout) + " output channels");
  }
  const auto g = geometry(input.shape(), padding);
  const auto col = im2col(input, g);
  NdTensor out({g.outH, g.outW, cout});
  ConstMap patches(col.data(), g.outH * g.outW, 9 * g.inC);
  ConstMap kernel(weights.data(), 9 * g.inC, cout);
  MutMap result(out.data(), g.outH * g.outW, cout);
  result.noalias() = patches * kernel;
  Eigen::Map<const Eigen::RowVectorXd> b(bias.data(), cout);
  result.rowwise() += b;
  return out;
}

Conv2dGradients conv2dBackward(const NdTensor& input, const NdTensor& weights,
                               const NdTensor& gradOutput, Padding padding,
                               bool needInputGrad) {
  checkConvShapes(input, weights);
  const std::size_t cout = weights.dim(3);
  const auto g = geometry(input.shape(), padding);
  if (gradOutput.shape() != Shape{g.outH, g.outW, cout}) {
    throw ShapeError("conv2d output gradient shape " + shapeToString(gradOutput.shape()) +
                     " does not match " + shapeToString({g.outH, g.outW, cout}));
  }
  const auto col = im2col(input, g);
  const std::size_t positions = g.outH * g.outW;
  ConstMap patches(col.data(), positions, 9 * g.inC);
  ConstMap dOut(gradOutput.data(), positions, cout);

  Conv2dGradients grads;
  grads.weights = NdTensor(weights.shape());
  MutMap dW(grads.weights.data(), 9 * g.inC, cout);
  dW.noalias() = patches.transpose() * dOut;
  grads.bias = NdTensor({cout});
  Eigen::Map<Eigen::RowVectorXd>(grads.bias.data(), cout) = dOut.colwise().sum();

  if (needInputGrad) {
    AlignedVector dCol(positions * 9 * g.inC);
    MutMap dPatches(dCol.data(), positions, 9 * g.inC);
    ConstMap kernel(weights.data(), 9 * g.inC, cout);
    dPatches.noalias() = dOut * kernel.transpose();
    grads.input = NdTensor(input.shape());
    col2im(dCol, g, grads.input);
  }
  return grads;
}

PoolResult maxPool2x2Forward(const NdTensor& input) {
  const Shape outShape = maxPool2x2OutputShape(input.shape());
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  PoolResult result{NdTensor(outShape), std::vector<std::uint32_t>(shapeProduct(outShape))};
  for (std::size_t oy = 0; oy < outShape[0]; ++oy) {
    for (std::size_t ox = 0; ox < outShape[1]; ++ox) {
      for (std::size_t c = 0; c < C; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t bestIndex = 0;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          const std::size_t y = 2 * oy + dy;
          if (y >= H) break;
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t x = 2 * ox + dx;
            if (x >= W) break;
            const std::size_t idx = (y * W + x) * C + c;
            if (input[idx] > best) {
              best = input[idx];
              bestIndex = static_cast<std::uint32_t>(idx);
            }
          }
        }
        const std::size_t o = (oy * outShape[1] + ox) * C + c;
        result.output[o] = best;
        result.argmax[o] = bestIndex;
      }
    }
  }
  return result;
}

NdTensor maxPool2x2Backward(const NdTensor& gradOutput,
                            const std::vector<std::uint32_t>& argmax,
                            const Shape& inputShape) {
  if (argmax.size() != gradOutput.size()) {
    throw ShapeError("max pool backward: argmax record does not match gradient size");
  }
  NdTensor grad(inputShape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad[argmax[i]] += gradOutput[i];
  return grad;
}

NdTensor denseForward(const NdTensor& input, const NdTensor& weights, const NdTensor& bias) {
  requireRank(weights, 2, "dense weights");
  if (input.size() != weights.dim(0)) {
    throw ShapeError("dense input has " + std::to_string(input.size()) +
                     " values, weights expect " + std::to_string(weights.dim(0)));
  }
  if (bias.size() != weights.dim(1)) {
    throw ShapeError("dense bias size does not match output width");
  }
  NdTensor out({weights.dim(1)});
  Eigen::Map<const Eigen::RowVectorXd> x(input.data(), input.size());
  ConstMap w(weights.data(), weights.dim(0), weights.dim(1));
  Eigen::Map<const Eigen::RowVectorXd> b(bias.data(), bias.size());
  Eigen::Map<Eigen::RowVectorXd>(out.data(), out.size()).noalias() = x * w + b;
  return out;
}

DenseGradients denseBackward(const NdTensor& input, const NdTensor& weights,
                             const NdTensor& gradOutput, bool needInputGrad) {
  requireRank(weights, 2, "dense weights");
  if (gradOutput.size() != weights.dim(1) || input.size() != weights.dim(0)) {
    throw ShapeError("dense backward shape mismatch");
  }
  DenseGradients grads;
  Eigen::Map<const Eigen::VectorXd> x(input.data(), input.size());
  Eigen::Map<const Eigen::RowVectorXd> dy(gradOutput.data(), gradOutput.size());
  grads.weights = NdTensor(weights.shape());
  MutMap(grads.weights.data(), weights.dim(0), weights.dim(1)).noalias() = x * dy;
  grads.bias = gradOutput.reshaped({gradOutput.size()});
  if (needInputGrad) {
    grads.input = NdTensor(input.shape());
    ConstMap w(weights.data(), weights.dim(0), weights.dim(1));
    Eigen::Map<Eigen::RowVectorXd>(grads.input.data(), input.size()).noalias() =
        dy * w.transpose();
  }
  return grads;
}

NdTensor reluForward(const NdTensor& input) {
  NdTensor out = input;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

NdTensor reluBackward(const NdTensor& input, const NdTensor& gradOutput) {
  if (input.size() != gradOutput.size()) throw ShapeError("relu backward shape mismatch");
  NdTensor grad(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    grad[i] = input[i] > 0.0 ? gradOutput[i] : 0.0;
  }
  return grad;
}

NdTensor softmaxForward(const NdTensor& logits) {
  if (logits.empty()) throw ShapeError("softmax of empty vector");
  NdTensor out(logits.shape());
  const double peak = logits.maxValue();
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out.values()) v /= total;
  return out;
}

NdTensor applyMask(const NdTensor& input, const std::vector<double>& mask) {
  if (mask.size() != input.size()) throw ShapeError("dropout mask size mismatch");
  NdTensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] * mask[i];
  return out;
}

}  // namespace fscope::ops
