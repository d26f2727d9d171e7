#include "featurescope/model.hpp"

#include <cmath>

namespace fscope {

const char* layerKindName(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3x3: return "Conv3x3";
    case LayerKind::MaxPool2x2: return "MaxPool2x2";
    case LayerKind::Dense: return "Dense";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Softmax: return "Softmax";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Dropout: return "Dropout";
  }
  return "Unknown";
}

namespace {

std::string opLabel(std::size_t i, const LayerSpec& layer) {
  return "layer " + std::to_string(i) + " (" + layerKindName(layer.kind) + ")";
}

Shape outputShape(std::size_t i, const LayerSpec& layer, const Shape& in) {
  auto fail = [&](const std::string& why) -> ShapeError {
    return ShapeError(opLabel(i, layer) + ": " + why + ", input shape " + shapeToString(in));
  };
  switch (layer.kind) {
    case LayerKind::Conv3x3:
      if (in.size() != 3) throw fail("expects a rank-3 feature tensor");
      if (layer.inChannels == 0 || layer.outChannels == 0) throw fail("channel counts must be positive");
      if (in[2] != layer.inChannels) {
        throw fail("expects depth " + std::to_string(layer.inChannels));
      }
      try {
        return ops::conv2dOutputShape(in, layer.outChannels, layer.padding);
      } catch (const ShapeError& e) {
        throw fail(e.what());
      }
    case LayerKind::MaxPool2x2:
      if (in.size() != 3 || in[0] == 0 || in[1] == 0) throw fail("expects a non-empty rank-3 tensor");
      return ops::maxPool2x2OutputShape(in);
    case LayerKind::Dense:
      if (layer.inChannels == 0 || layer.outChannels == 0) throw fail("sizes must be positive");
      if (in.size() != 1 || in[0] != layer.inChannels) {
        throw fail("expects a vector of " + std::to_string(layer.inChannels));
      }
      return {layer.outChannels};
    case LayerKind::Softmax:
      if (in.size() != 1) throw fail("expects a vector");
      return in;
    case LayerKind::Flatten:
      return {shapeProduct(in)};
    case LayerKind::ReLU:
      return in;
    case LayerKind::Dropout:
      if (!(layer.rate >= 0.0 && layer.rate < 1.0)) throw fail("dropout rate must be in [0,1)");
      return in;
  }
  throw fail("unknown layer kind");
}

}  // namespace

std::vector<Shape> ModelSpec::propagateShapes() const {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape current = inputShape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    current = outputShape(i, layers[i], current);
    shapes.push_back(current);
  }
  return shapes;
}

std::vector<FeatureLayer> ModelSpec::featureLayers() const {
  const auto shapes = propagateShapes();
  std::vector<FeatureLayer> result;
  result.push_back({"input", std::nullopt, inputShape});
  std::size_t convs = 0, denses = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto kind = layers[i].kind;
    if (kind != LayerKind::Conv3x3 && kind != LayerKind::Dense) continue;
    std::size_t op = i;
    if (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::ReLU) op = i + 1;
    const std::string name = kind == LayerKind::Conv3x3 ? "conv" + std::to_string(++convs)
                                                        : "dense" + std::to_string(++denses);
    result.push_back({name, op, shapes[op]});
  }
  return result;
}

std::size_t ModelSpec::logitsOp() const {
  if (layers.empty()) throw Error("model has no layers");
  if (layers.back().kind == LayerKind::Softmax) {
    if (layers.size() < 2) throw Error("softmax without a preceding layer");
    return layers.size() - 2;
  }
  return layers.size() - 1;
}

std::size_t ModelParameters::paramCount() const {
  std::size_t total = 0;
  for (const auto& p : perLayer) total += p.weights.size() + p.bias.size();
  return total;
}

void Model::validate() const {
  spec.propagateShapes();
  if (params.perLayer.size() != spec.layers.size()) {
    throw ShapeError("parameter list has " + std::to_string(params.perLayer.size()) +
                     " entries for " + std::to_string(spec.layers.size()) + " layers");
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    const auto& p = params.perLayer[i];
    Shape w, b;
    if (layer.kind == LayerKind::Conv3x3) {
      w = {3, 3, layer.inChannels, layer.outChannels};
      b = {layer.outChannels};
    } else if (layer.kind == LayerKind::Dense) {
      w = {layer.inChannels, layer.outChannels};
      b = {layer.outChannels};
    }
    if (p.weights.shape() != w || p.bias.shape() != b) {
      throw ShapeError(opLabel(i, layer) + ": parameter shapes " +
                       shapeToString(p.weights.shape()) + "/" + shapeToString(p.bias.shape()) +
                       " expected " + shapeToString(w) + "/" + shapeToString(b));
    }
  }
}

ModelParameters Model::zeroParameters() const {
  ModelParameters zero;
  zero.perLayer.reserve(params.perLayer.size());
  for (const auto& p : params.perLayer) {
    zero.perLayer.push_back({NdTensor(p.weights.shape()), NdTensor(p.bias.shape())});
  }
  return zero;
}

const NdTensor& ForwardTrace::opOutput(std::size_t op) const {
  if (!captured) throw Error("trace was not captured; rerun forward with captureAll");
  if (op >= opOutputs.size()) {
    throw Error("op " + std::to_string(op) + " was not reached by this trace");
  }
  return opOutputs[op];
}

const NdTensor& ForwardTrace::featureActivation(const ModelSpec& spec, std::size_t layer) const {
  const auto layers = spec.featureLayers();
  if (layer >= layers.size()) {
    throw Error("feature layer " + std::to_string(layer) + " out of range (model has " +
                std::to_string(layers.size()) + ")");
  }
  if (!layers[layer].op) return input;
  return opOutput(*layers[layer].op);
}

ForwardTrace forward(const Model& model, const NdTensor& image, const ForwardOptions& options) {
  const auto& layers = model.spec.layers;
  if (image.shape() != model.spec.inputShape) {
    throw ShapeError("input image shape " + shapeToString(image.shape()) +
                     " does not match model input " + shapeToString(model.spec.inputShape));
  }
  if (options.training && options.rng == nullptr) {
    throw Error("training-mode forward requires a random source for dropout");
  }
  const std::size_t last = options.stopAfterOp ? *options.stopAfterOp : layers.size() - 1;
  if (last >= layers.size()) throw Error("stopAfterOp beyond the last layer");

  ForwardTrace trace;
  trace.input = image;
  trace.captured = options.captureAll;
  trace.training = options.training;
  trace.lastOp = last;
  trace.poolArgmax.resize(layers.size());
  trace.dropoutMasks.resize(layers.size());
  if (options.captureAll) trace.opOutputs.reserve(last + 1);

  const std::size_t logitsOp = model.spec.logitsOp();
  NdTensor current = image;
  for (std::size_t i = 0; i <= last; ++i) {
    const auto& layer = layers[i];
    const auto& p = model.params.perLayer[i];
    NdTensor next;
    try {
      switch (layer.kind) {
        case LayerKind::Conv3x3:
          if (current.rank() != 3 || current.dim(2) != layer.inChannels) {
            throw ShapeError("input shape " + shapeToString(current.shape()));
          }
          next = ops::conv2dForward(current, p.weights, p.bias, layer.padding);
          break;
        case LayerKind::MaxPool2x2: {
          auto pooled = ops::maxPool2x2Forward(current);
          next = std::move(pooled.output);
          if (options.captureAll) trace.poolArgmax[i] = std::move(pooled.argmax);
          break;
        }
        case LayerKind::Dense:
          next = ops::denseForward(current, p.weights, p.bias);
          break;
        case LayerKind::ReLU:
          next = ops::reluForward(current);
          break;
        case LayerKind::Softmax:
          next = ops::softmaxForward(current);
          break;
        case LayerKind::Flatten:
          next = current.reshaped({current.size()});
          break;
        case LayerKind::Dropout:
          if (options.training && layer.rate > 0.0) {
            std::vector<double> mask(current.size());
            const double keep = 1.0 / (1.0 - layer.rate);
            for (double& m : mask) m = uniform01(*options.rng) < layer.rate ? 0.0 : keep;
            next = ops::applyMask(current, mask);
            trace.dropoutMasks[i] = std::move(mask);
          } else {
            next = current;
          }
          break;
      }
    } catch (const ShapeError& e) {
      throw ShapeError(opLabel(i, layer) + ": " + e.what());
    }
    if (i == logitsOp) trace.logits = next;
    if (options.captureAll) trace.opOutputs.push_back(next);
    current = std::move(next);
  }
  if (last == layers.size() - 1) {
    trace.probabilities = layers.back().kind == LayerKind::Softmax
                              ? current
                              : ops::softmaxForward(trace.logits);
  }
  return trace;
}

ForwardTrace forwardToLayer(const Model& model, const NdTensor& image, std::size_t layer) {
  const auto layers = model.spec.featureLayers();
  if (layer >= layers.size()) {
    throw Error("feature layer " + std::to_string(layer) + " out of range (model has " +
                std::to_string(layers.size()) + ")");
  }
  ForwardOptions options;
  options.captureAll = true;
  if (layers[layer].op) {
    options.stopAfterOp = *layers[layer].op;
  } else {
    options.stopAfterOp = 0;
  }
  return forward(model, image, options);
}

NdTensor backwardFrom(const Model& model, const ForwardTrace& trace, std::size_t op,
                      NdTensor grad, ParameterGradients* params, bool needInputGrad) {
  if (!trace.captured) {
    throw Error("backward pass needs a captured trace (forward with captureAll)");
  }
  if (op > trace.lastOp) throw Error("backward start op beyond the traced range");
  const auto& layers = model.spec.layers;
  for (std::size_t i = op + 1; i-- > 0;) {
    const auto& layer = layers[i];
    const NdTensor& in = i == 0 ? trace.input : trace.opOutputs[i - 1];
    const bool wantInput = i > 0 || needInputGrad;
    switch (layer.kind) {
      case LayerKind::Conv3x3: {
        auto g = ops::conv2dBackward(in, model.params.perLayer[i].weights, grad,
                                     layer.padding, wantInput);
        if (params) {
          auto& dst = params->perLayer[i];
          for (std::size_t k = 0; k < dst.weights.size(); ++k) dst.weights[k] += g.weights[k];
          for (std::size_t k = 0; k < dst.bias.size(); ++k) dst.bias[k] += g.bias[k];
        }
        grad = std::move(g.input);
        break;
      }
      case LayerKind::Dense: {
        auto g = ops::denseBackward(in, model.params.perLayer[i].weights, grad, wantInput);
        if (params) {
          auto& dst = params->perLayer[i];
          for (std::size_t k = 0; k < dst.weights.size(); ++k) dst.weights[k] += g.weights[k];
          for (std::size_t k = 0; k < dst.bias.size(); ++k) dst.bias[k] += g.bias[k];
        }
        grad = std::move(g.input);
        break;
      }
      case LayerKind::MaxPool2x2:
        if (trace.poolArgmax[i].empty()) {
          throw Error("max pool at layer " + std::to_string(i) + " has no argmax record");
        }
        grad = ops::maxPool2x2Backward(grad, trace.poolArgmax[i], in.shape());
        break;
      case LayerKind::ReLU:
        grad = ops::reluBackward(in, grad);
        break;
      case LayerKind::Softmax: {
        const NdTensor& p = trace.opOutputs[i];
        double dot = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) dot += p[k] * grad[k];
        for (std::size_t k = 0; k < p.size(); ++k) grad[k] = p[k] * (grad[k] - dot);
        break;
      }
      case LayerKind::Flatten:
        grad = grad.reshaped(in.shape());
        break;
      case LayerKind::Dropout:
        if (trace.training && layer.rate > 0.0) {
          if (trace.dropoutMasks[i].empty()) {
            throw Error("dropout at layer " + std::to_string(i) + " has no mask record");
          }
          grad = ops::applyMask(grad, trace.dropoutMasks[i]);
        }
        break;
    }
    if (i == 0 && !needInputGrad) return {};
  }
  return grad;
}

ParameterGradients backwardToParams(const Model& model, const ForwardTrace& trace,
                                    const NdTensor& lossGradAtLogits) {
  const std::size_t op = model.spec.logitsOp();
  if (!trace.captured || trace.lastOp < op) {
    throw Error("parameter gradients need a complete captured trace");
  }
  if (lossGradAtLogits.size() != trace.opOutputs[op].size()) {
    throw ShapeError("loss gradient has " + std::to_string(lossGradAtLogits.size()) +
                     " values for " + std::to_string(trace.opOutputs[op].size()) + " logits");
  }
  auto grads = model.zeroParameters();
  backwardFrom(model, trace, op, lossGradAtLogits.reshaped(trace.opOutputs[op].shape()), &grads,
               false);
  return grads;
}

NdTensor backwardToInput(const Model& model, const ForwardTrace& trace, std::size_t layer,
                         const NdTensor& gradAtLayer) {
  const auto layers = model.spec.featureLayers();
  if (layer >= layers.size()) {
    throw Error("objective refers to feature layer " + std::to_string(layer) +
                " but the model has " + std::to_string(layers.size()));
  }
  if (gradAtLayer.shape() != layers[layer].shape) {
    throw ShapeError("objective gradient shape " + shapeToString(gradAtLayer.shape()) +
                     " does not match layer " + layers[layer].name + " shape " +
                     shapeToString(layers[layer].shape));
  }
  if (!layers[layer].op) return gradAtLayer;
  return backwardFrom(model, trace, *layers[layer].op, gradAtLayer, nullptr, true);
}

}  // namespace fscope
