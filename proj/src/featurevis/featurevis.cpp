#include "featurescope/featurevis.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

#include "featurescope/enhance.hpp"
#include "featurescope/parallel.hpp"
#include "featurescope/tsne.hpp"

namespace fscope {

namespace {

// In-place unnormalized 2-D transforms. Plans are made once per size;
// executing a plan on new arrays is thread safe, planning is not.
class Fft2 {
 public:
  static void forward(std::complex<double>* data, std::size_t n) { run(data, n, FFTW_FORWARD); }
  static void backward(std::complex<double>* data, std::size_t n) { run(data, n, FFTW_BACKWARD); }

 private:
  static void run(std::complex<double>* data, std::size_t n, int sign) {
    fftw_plan plan = nullptr;
    {
      static std::mutex mutex;
      static std::map<std::pair<std::size_t, int>, fftw_plan> plans;
      std::lock_guard lock(mutex);
      auto& slot = plans[{n, sign}];
      if (!slot) {
        std::vector<std::complex<double>> scratch(n * n);
        auto* p = reinterpret_cast<fftw_complex*>(scratch.data());
        slot = fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n), p, p, sign,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
        if (!slot) throw Error("FFT planning failed for size " + std::to_string(n));
      }
      plan = slot;
    }
    auto* p = reinterpret_cast<fftw_complex*>(data);
    fftw_execute_dft(plan, p, p);
  }
};

double sigmoid(double x) {
  const double p = 1.0 / (1.0 + std::exp(-x));
  // Keep pixels strictly inside (0, 1) even where the exponential saturates.
  return std::clamp(p, 1e-12, 1.0 - 1e-12);
}

// Orthonormal transform pair: both directions carry 1/N.
double transformNorm(std::size_t n) { return 1.0 / static_cast<double>(n); }

// Pre-sigmoid real field of one channel, N*N.
std::vector<double> channelField(const FourierCanvas& canvas, std::size_t c) {
  const std::size_t n = canvas.support, nn = n * n;
  std::vector<std::complex<double>> buf(nn);
  for (std::size_t k = 0; k < nn; ++k) buf[k] = canvas.frequencyScale[k] * canvas.spectrum[c * nn + k];
  Fft2::backward(buf.data(), n);
  std::vector<double> out(nn);
  const double norm = transformNorm(n);
  for (std::size_t k = 0; k < nn; ++k) out[k] = buf[k].real() * norm;
  return out;
}

void checkCanvas(const FourierCanvas& canvas) {
  const std::size_t nn = canvas.support * canvas.support;
  if (canvas.outputSize > canvas.support || canvas.spectrum.size() != canvas.channels * nn ||
      canvas.frequencyScale.size() != nn) {
    throw ShapeError("Fourier canvas arrays do not match its support " + std::to_string(canvas.support));
  }
}

std::vector<double> gaussianKernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  return k;
}

NdTensor blurImage(const NdTensor& image, double sigma) {
  const auto k = gaussianKernel(sigma);
  const long r = static_cast<long>(k.size() / 2);
  const long H = static_cast<long>(image.dim(0)), W = static_cast<long>(image.dim(1));
  const std::size_t C = image.dim(2);
  NdTensor tmp(image.shape()), out(image.shape());
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (long d = -r; d <= r; ++d) s += k[d + r] * image.at(y, std::clamp(x + d, 0L, W - 1), c);
        tmp.at(y, x, c) = s;
      }
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (long d = -r; d <= r; ++d) s += k[d + r] * tmp.at(std::clamp(y + d, 0L, H - 1), x, c);
        out.at(y, x, c) = s;
      }
  return out;
}

// Squared-difference total variation and its gradient.
double totalVariation(const NdTensor& image, NdTensor* grad) {
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  double tv = 0.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        if (y + 1 < H) {
          const double d = image.at(y + 1, x, c) - image.at(y, x, c);
          tv += d * d;
          if (grad) {
            grad->at(y + 1, x, c) += 2 * d;
            grad->at(y, x, c) -= 2 * d;
          }
        }
        if (x + 1 < W) {
          const double d = image.at(y, x + 1, c) - image.at(y, x, c);
          tv += d * d;
          if (grad) {
            grad->at(y, x + 1, c) += 2 * d;
            grad->at(y, x, c) -= 2 * d;
          }
        }
      }
  return tv;
}

struct LayerGeometry {
  std::size_t positions = 1, channels = 0, height = 1, width = 1;
};

LayerGeometry geometryOf(const Shape& shape) {
  LayerGeometry g;
  if (shape.size() == 3) {
    g.height = shape[0];
    g.width = shape[1];
    g.channels = shape[2];
    g.positions = shape[0] * shape[1];
  } else if (shape.size() == 1) {
    g.channels = shape[0];
  } else {
    throw ShapeError("objective layer shape " + shapeToString(shape) + " is neither HxWxC nor a vector");
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Canvas

std::size_t paddedSupport(std::size_t n) { return n % 2 ? n + 1 : n + 2; }

std::vector<double> frequencyScaleTable(std::size_t n) {
  std::vector<double> out(n * n);
  const double nd = static_cast<double>(n);
  auto freq = [&](std::size_t k) {
    return (k <= n / 2 ? static_cast<double>(k) : static_cast<double>(k) - nd) / nd;
  };
  for (std::size_t ky = 0; ky < n; ++ky)
    for (std::size_t kx = 0; kx < n; ++kx) {
      const double f = std::hypot(freq(ky), freq(kx));
      out[ky * n + kx] = 1.0 / std::max(f, 1.0 / nd);
    }
  return out;
}

FourierCanvas FourierCanvas::zeros(std::size_t outputSize, std::size_t channels) {
  FourierCanvas c;
  c.outputSize = outputSize;
  c.channels = channels;
  c.support = paddedSupport(outputSize);
  c.spectrum.assign(channels * c.support * c.support, {0.0, 0.0});
  c.frequencyScale = frequencyScaleTable(c.support);
  return c;
}

FourierCanvas FourierCanvas::random(Rng& rng, double stddev, std::size_t outputSize, std::size_t channels) {
  auto c = zeros(outputSize, channels);
  for (auto& s : c.spectrum) {
    const double re = stddev * standardNormal(rng);
    const double im = stddev * standardNormal(rng);
    s = {re, im};
  }
  return c;
}

NdTensor decodeCanvas(const FourierCanvas& canvas) {
  checkCanvas(canvas);
  const std::size_t n = canvas.support, out = canvas.outputSize, C = canvas.channels;
  NdTensor image({out, out, C});
  for (std::size_t c = 0; c < C; ++c) {
    const auto field = channelField(canvas, c);
    for (std::size_t y = 0; y < out; ++y)
      for (std::size_t x = 0; x < out; ++x) image.at(y, x, c) = sigmoid(field[y * n + x]);
  }
  return image;
}

FourierCanvas encodeImage(const NdTensor& image, std::size_t support) {
  if (image.rank() != 3 || image.dim(0) != image.dim(1)) {
    throw ShapeError("canvas images must be square HxWxC, got " + shapeToString(image.shape()));
  }
  const std::size_t out = image.dim(0), C = image.dim(2);
  auto canvas = FourierCanvas::zeros(out, C);
  if (support) {
    if (support < out) throw ShapeError("canvas support smaller than the image");
    canvas.support = support;
    canvas.spectrum.assign(C * support * support, {0.0, 0.0});
    canvas.frequencyScale = frequencyScaleTable(support);
  }
  const std::size_t n = canvas.support, nn = n * n;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::complex<double>> buf(nn, {0.0, 0.0});
    for (std::size_t y = 0; y < out; ++y)
      for (std::size_t x = 0; x < out; ++x) {
        const double p = image.at(y, x, c);
        if (!(p > 0.0 && p < 1.0)) throw Error("only images strictly inside (0, 1) can be encoded");
        buf[y * n + x] = std::log(p / (1.0 - p));
      }
    Fft2::forward(buf.data(), n);
    for (std::size_t k = 0; k < nn; ++k) {
      canvas.spectrum[c * nn + k] = buf[k] * transformNorm(n) / canvas.frequencyScale[k];
    }
  }
  return canvas;
}

std::vector<std::complex<double>> spectrumGradient(const FourierCanvas& canvas, const NdTensor& pixelGradient) {
  checkCanvas(canvas);
  const std::size_t n = canvas.support, nn = n * n, out = canvas.outputSize, C = canvas.channels;
  if (pixelGradient.shape() != Shape{out, out, C}) {
    throw ShapeError("pixel gradient " + shapeToString(pixelGradient.shape()) + " does not match the canvas");
  }
  std::vector<std::complex<double>> grad(canvas.spectrum.size());
  const double norm = transformNorm(n);
  for (std::size_t c = 0; c < C; ++c) {
    const auto field = channelField(canvas, c);
    std::vector<std::complex<double>> buf(nn, {0.0, 0.0});
    for (std::size_t y = 0; y < out; ++y)
      for (std::size_t x = 0; x < out; ++x) {
        const double p = sigmoid(field[y * n + x]);
        buf[y * n + x] = pixelGradient.at(y, x, c) * p * (1.0 - p);
      }
    Fft2::forward(buf.data(), n);
    for (std::size_t k = 0; k < nn; ++k) grad[c * nn + k] = canvas.frequencyScale[k] * norm * buf[k];
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Transforms

void VisConfig::validate() const {
  if (steps == 0) throw Error("feature visualization needs a positive step count");
  if (!(learningRate >= 0.0) || !std::isfinite(learningRate)) throw Error("learning rate must be finite and >= 0");
  if (!(scaleLo > 0.0 && scaleLo <= 1.0 && scaleHi >= 1.0 && std::isfinite(scaleHi))) {
    throw Error("scale range must be positive and contain 1");
  }
  if (!(rotateDeg >= 0.0 && rotateDeg < 180.0)) throw Error("rotation range must be in [0, 180) degrees");
  if (!(tvWeight >= 0.0) || !(gradientBlurSigma >= 0.0)) throw Error("penalty weights must be >= 0");
  if (!(initialStddev >= 0.0)) throw Error("initial spectrum deviation must be >= 0");
}

bool VisConfig::identityTransforms() const {
  return jitterPx == 0 && scaleLo == 1.0 && scaleHi == 1.0 && rotateDeg == 0.0;
}

TransformParams sampleTransform(const VisConfig& config, Rng& rng) {
  if (config.identityTransforms()) return {};
  TransformParams t;
  const auto j = static_cast<long>(config.jitterPx);
  t.dy = static_cast<int>(static_cast<long>(uniformIndex(rng, 2 * j + 1)) - j);
  t.dx = static_cast<int>(static_cast<long>(uniformIndex(rng, 2 * j + 1)) - j);
  t.scale = uniform(rng, config.scaleLo, config.scaleHi);
  t.rotateRad = uniform(rng, -config.rotateDeg, config.rotateDeg) * std::numbers::pi / 180.0;
  return t;
}

ImageWarp::ImageWarp(std::size_t height, std::size_t width, const TransformParams& params)
    : h_(height), w_(width), src_(height * width), weight_(height * width) {
  if (!(params.scale > 0.0)) throw Error("transform scale must be positive");
  const double cy = 0.5 * static_cast<double>(height - 1), cx = 0.5 * static_cast<double>(width - 1);
  const double cs = std::cos(params.rotateRad) / params.scale, sn = std::sin(params.rotateRad) / params.scale;
  auto reflect = [](double u, std::size_t size) {
    if (size == 1) return 0.0;
    const double last = static_cast<double>(size - 1);
    u = std::fmod(std::abs(u), 2.0 * last);
    return u > last ? 2.0 * last - u : u;
  };
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double oy = static_cast<double>(y) - cy, ox = static_cast<double>(x) - cx;
      // Inverse rotation and scale, then undo the shift.
      double sy = cy + cs * oy - sn * ox - params.dy;
      double sx = cx + sn * oy + cs * ox - params.dx;
      sy = reflect(sy, height);
      sx = reflect(sx, width);
      const auto y0 = static_cast<std::size_t>(std::floor(sy));
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      const std::size_t y1 = std::min(y0 + 1, height - 1), x1 = std::min(x0 + 1, width - 1);
      const std::size_t o = y * width + x;
      src_[o] = {y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1};
      weight_[o] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    }
  }
}

NdTensor ImageWarp::apply(const NdTensor& image) const {
  if (image.rank() != 3 || image.dim(0) != h_ || image.dim(1) != w_) {
    throw ShapeError("warp expects " + std::to_string(h_) + "x" + std::to_string(w_) + "xC, got " +
                     shapeToString(image.shape()));
  }
  const std::size_t C = image.dim(2);
  NdTensor out(image.shape());
  for (std::size_t o = 0; o < h_ * w_; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (int t = 0; t < 4; ++t) s += weight_[o][t] * image[src_[o][t] * C + c];
      out[o * C + c] = s;
    }
  return out;
}

NdTensor ImageWarp::adjoint(const NdTensor& outputGradient) const {
  if (outputGradient.rank() != 3 || outputGradient.dim(0) != h_ || outputGradient.dim(1) != w_) {
    throw ShapeError("warp adjoint shape mismatch: " + shapeToString(outputGradient.shape()));
  }
  const std::size_t C = outputGradient.dim(2);
  NdTensor in(outputGradient.shape());
  for (std::size_t o = 0; o < h_ * w_; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (int t = 0; t < 4; ++t) in[src_[o][t] * C + c] += weight_[o][t] * outputGradient[o * C + c];
  return in;
}

NdTensor randomTransform(const NdTensor& image, const VisConfig& config, Rng& rng) {
  config.validate();
  const auto params = sampleTransform(config, rng);
  return ImageWarp(image.dim(0), image.dim(1), params).apply(image);
}

// ---------------------------------------------------------------------------
// Objectives

Objective Objective::neuron(std::size_t layer, std::size_t channel, std::size_t y, std::size_t x) {
  Objective o;
  o.kind = Kind::Neuron;
  o.layer = layer;
  o.channel = channel;
  o.y = y;
  o.x = x;
  return o;
}

Objective Objective::channelMean(std::size_t layer, std::size_t channel) {
  Objective o;
  o.kind = Kind::Channel;
  o.layer = layer;
  o.channel = channel;
  return o;
}

Objective Objective::weightedChannels(std::size_t layer, std::vector<double> weights) {
  Objective o;
  o.kind = Kind::WeightedChannels;
  o.layer = layer;
  o.weights = std::move(weights);
  return o;
}

Objective Objective::neuronGroup(std::size_t layer, std::vector<double> direction) {
  Objective o;
  o.kind = Kind::NeuronGroup;
  o.layer = layer;
  o.weights = std::move(direction);
  return o;
}

const char* objectiveKindName(Objective::Kind kind) {
  switch (kind) {
    case Objective::Kind::Neuron: return "neuron";
    case Objective::Kind::Channel: return "channel";
    case Objective::Kind::WeightedChannels: return "weighted-channels";
    case Objective::Kind::NeuronGroup: return "neuron-group";
  }
  return "unknown";
}

void Objective::validate(const ModelSpec& spec) const {
  const auto layers = spec.featureLayers();
  if (layer == 0 || layer >= layers.size()) {
    throw Error("objective layer " + std::to_string(layer) + " must be in [1, " +
                std::to_string(layers.size() - 1) + "]");
  }
  const auto g = geometryOf(layers[layer].shape);
  switch (kind) {
    case Kind::Neuron:
      if (y >= g.height || x >= g.width) {
        throw Error("neuron position (" + std::to_string(y) + ", " + std::to_string(x) + ") outside layer " +
                    layers[layer].name);
      }
      [[fallthrough]];
    case Kind::Channel:
      if (channel >= g.channels) {
        throw Error("channel " + std::to_string(channel) + " out of range for layer " + layers[layer].name +
                    " with " + std::to_string(g.channels) + " channels");
      }
      break;
    case Kind::WeightedChannels:
    case Kind::NeuronGroup: {
      if (weights.size() != g.channels) {
        throw Error("objective has " + std::to_string(weights.size()) + " weights but layer " +
                    layers[layer].name + " has " + std::to_string(g.channels) + " channels");
      }
      double norm = 0.0;
      for (double w : weights) {
        if (!std::isfinite(w)) throw Error("objective weights must be finite");
        norm += w * w;
      }
      if (kind == Kind::NeuronGroup && norm == 0.0) throw Error("neuron-group direction is zero");
      break;
    }
  }
}

double Objective::value(const NdTensor& activation) const {
  const auto g = geometryOf(activation.shape());
  const double inv = 1.0 / static_cast<double>(g.positions);
  switch (kind) {
    case Kind::Neuron:
      return activation[(y * g.width + x) * g.channels + channel];
    case Kind::Channel:
      return meanChannelActivation(activation, channel);
    case Kind::WeightedChannels:
    case Kind::NeuronGroup: {
      double norm = 1.0;
      if (kind == Kind::NeuronGroup) {
        norm = 0.0;
        for (double w : weights) norm += w * w;
        norm = std::sqrt(norm);
      }
      double s = 0.0;
      for (std::size_t p = 0; p < g.positions; ++p)
        for (std::size_t c = 0; c < g.channels; ++c) s += weights[c] * activation[p * g.channels + c];
      return s * inv / norm;
    }
  }
  return 0.0;
}

NdTensor Objective::gradient(const NdTensor& activation) const {
  const auto g = geometryOf(activation.shape());
  const double inv = 1.0 / static_cast<double>(g.positions);
  NdTensor grad(activation.shape());
  switch (kind) {
    case Kind::Neuron:
      grad[(y * g.width + x) * g.channels + channel] = 1.0;
      break;
    case Kind::Channel:
      for (std::size_t p = 0; p < g.positions; ++p) grad[p * g.channels + channel] = inv;
      break;
    case Kind::WeightedChannels:
    case Kind::NeuronGroup: {
      double norm = 1.0;
      if (kind == Kind::NeuronGroup) {
        norm = 0.0;
        for (double w : weights) norm += w * w;
        norm = std::sqrt(norm);
      }
      for (std::size_t p = 0; p < g.positions; ++p)
        for (std::size_t c = 0; c < g.channels; ++c) grad[p * g.channels + c] = weights[c] * inv / norm;
      break;
    }
  }
  return grad;
}

std::string Objective::describe() const {
  std::string s = std::string(objectiveKindName(kind)) + " layer " + std::to_string(layer);
  if (kind == Kind::Neuron || kind == Kind::Channel) s += " channel " + std::to_string(channel);
  if (kind == Kind::Neuron) s += " at (" + std::to_string(y) + ", " + std::to_string(x) + ")";
  return s;
}

double meanChannelActivation(const NdTensor& activation, std::size_t channel) {
  const auto g = geometryOf(activation.shape());
  if (channel >= g.channels) throw Error("channel " + std::to_string(channel) + " out of range");
  double s = 0.0;
  for (std::size_t p = 0; p < g.positions; ++p) s += activation[p * g.channels + channel];
  return s / static_cast<double>(g.positions);
}

double evaluateObjective(const Model& model, const Objective& objective, const NdTensor& image) {
  objective.validate(model.spec);
  const auto trace = forwardToLayer(model, image, objective.layer);
  return objective.value(trace.featureActivation(model.spec, objective.layer));
}

// ---------------------------------------------------------------------------
// Optimization

double saturationFraction(const NdTensor& image) {
  if (image.empty()) return 0.0;
  std::size_t out = 0;
  for (double v : image.values()) out += v < 0.02 || v > 0.98;
  return static_cast<double>(out) / static_cast<double>(image.size());
}

double objectiveWithGradient(const Model& model, const Objective& objective, const VisConfig& config,
                             const NdTensor& image, NdTensor& pixelGradient) {
  const auto trace = forwardToLayer(model, image, objective.layer);
  const auto& act = trace.featureActivation(model.spec, objective.layer);
  double value = objective.value(act);
  const auto seed = objective.gradient(act);
  pixelGradient = backwardToInput(model, trace, objective.layer, seed);
  if (config.reviveSilent && value == 0.0 &&
      std::all_of(pixelGradient.values().begin(), pixelGradient.values().end(), [](double g) { return g == 0.0; })) {
    // Every unit the objective reads is below its ReLU threshold. Ascend the
    // pre-activation instead until one of them switches on.
    const auto op = model.spec.featureLayers()[objective.layer].op;
    if (op && *op > 0 && model.spec.layers[*op].kind == LayerKind::ReLU) {
      pixelGradient = backwardFrom(model, trace, *op - 1, seed, nullptr, true);
    }
  }
  if (config.tvWeight > 0.0) {
    NdTensor tvGrad(image.shape());
    value -= config.tvWeight * totalVariation(image, &tvGrad);
    for (std::size_t i = 0; i < tvGrad.size(); ++i) pixelGradient[i] -= config.tvWeight * tvGrad[i];
  }
  return value;
}

FeatureImage optimize(const Model& model, const Objective& objective, const VisConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t size = model.spec.inputShape.at(0);
  auto canvas = FourierCanvas::random(rng, config.initialStddev, size, model.spec.inputShape.at(2));
  // Transform draws use a stream separate from the initial spectrum.
  return optimizeFrom(model, objective, config, std::move(canvas));
}

FeatureImage optimizeFrom(const Model& model, const Objective& objective, const VisConfig& config,
                          FourierCanvas canvas) {
  config.validate();
  objective.validate(model.spec);
  checkCanvas(canvas);
  const Shape expected{canvas.outputSize, canvas.outputSize, canvas.channels};
  if (expected != model.spec.inputShape) {
    throw ShapeError("canvas " + shapeToString(expected) + " does not match model input " +
                     shapeToString(model.spec.inputShape));
  }
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t count = canvas.spectrum.size();
  std::vector<double> m(2 * count, 0.0), v(2 * count, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double beta1t = 1.0, beta2t = 1.0;

  FeatureImage out;
  out.objective = objective;
  out.steps = config.steps;
  out.objectiveHistory.reserve(config.steps);
  const std::size_t size = canvas.outputSize;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const NdTensor image = decodeCanvas(canvas);
    const auto params = sampleTransform(config, rng);
    const bool identity = params.dy == 0 && params.dx == 0 && params.scale == 1.0 && params.rotateRad == 0.0;
    NdTensor grad;
    double value = 0.0;
    if (identity) {
      value = objectiveWithGradient(model, objective, config, image, grad);
    } else {
      const ImageWarp warp(size, size, params);
      value = objectiveWithGradient(model, objective, config, warp.apply(image), grad);
      grad = warp.adjoint(grad);
    }
    if (!std::isfinite(value) || !grad.allFinite()) {
      throw Error("feature visualization objective became non-finite at step " + std::to_string(step + 1) +
                  " (" + objective.describe() + ")");
    }
    out.objectiveHistory.push_back(value);
    if (config.gradientBlurSigma > 0.0) grad = blurImage(grad, config.gradientBlurSigma);
    const auto g = spectrumGradient(canvas, grad);
    beta1t *= beta1;
    beta2t *= beta2;
    for (std::size_t k = 0; k < count; ++k) {
      double parts[2] = {g[k].real(), g[k].imag()};
      double step2[2];
      for (int r = 0; r < 2; ++r) {
        double& mk = m[2 * k + r];
        double& vk = v[2 * k + r];
        mk = beta1 * mk + (1 - beta1) * parts[r];
        vk = beta2 * vk + (1 - beta2) * parts[r] * parts[r];
        const double mhat = mk / (1 - beta1t), vhat = vk / (1 - beta2t);
        step2[r] = config.learningRate * mhat / (std::sqrt(vhat) + eps);
      }
      // Ascent.
      canvas.spectrum[k] += std::complex<double>(step2[0], step2[1]);
    }
  }
  out.pixels = decodeCanvas(canvas);
  out.saturationFraction = saturationFraction(out.pixels);
  out.finalObjective = evaluateObjective(model, objective, out.pixels);
  out.canvas = std::move(canvas);
  return out;
}

GuardAdvice overOptimizationGuard(const std::vector<double>& history, double saturation) {
  GuardAdvice advice;
  advice.saturated = saturation > 0.3;
  if (history.size() >= 5) {
    const std::size_t tail = std::max<std::size_t>(1, history.size() / 5);
    const double start = history[history.size() - tail - 1];
    double best = start;
    for (std::size_t i = history.size() - tail; i < history.size(); ++i) best = std::max(best, history[i]);
    advice.plateaued = best - start <= 0.01 * std::max(std::abs(start), 1e-12);
  }
  advice.flagged = advice.saturated || advice.plateaued;
  if (advice.saturated) advice.reason = "saturation " + std::to_string(saturation) + " above 0.3";
  if (advice.plateaued) {
    if (!advice.reason.empty()) advice.reason += "; ";
    advice.reason += "objective flat over the final fifth of steps";
  }
  return advice;
}

namespace {

Matrix atlasActivations(const LayerAtlas& atlas, const Model& model) {
  const auto shape = model.spec.featureLayers().at(atlas.layer).shape;
  Matrix X(static_cast<Eigen::Index>(atlas.images.size()), static_cast<Eigen::Index>(shapeProduct(shape)));
  parallelFor(atlas.images.size(), [&](std::size_t i) {
    const auto trace = forwardToLayer(model, atlas.images[i].pixels, atlas.layer);
    const auto& act = trace.featureActivation(model.spec, atlas.layer);
    for (std::size_t k = 0; k < act.size(); ++k) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = act[k];
  });
  return X;
}

}  // namespace

LayerAtlas generateLayerAtlas(const Model& model, std::size_t layer, const VisConfig& config,
                              std::vector<std::size_t> channels, bool similarityOrder) {
  config.validate();
  const auto layers = model.spec.featureLayers();
  if (layer == 0 || layer >= layers.size()) throw Error("atlas layer " + std::to_string(layer) + " out of range");
  const auto g = geometryOf(layers[layer].shape);
  if (channels.empty()) {
    channels.resize(g.channels);
    for (std::size_t c = 0; c < g.channels; ++c) channels[c] = c;
  }
  for (auto c : channels) Objective::channelMean(layer, c).validate(model.spec);

  LayerAtlas atlas;
  atlas.layer = layer;
  atlas.channels = channels;
  atlas.images.resize(channels.size());
  parallelFor(channels.size(), [&](std::size_t i) {
    atlas.images[i] = optimize(model, Objective::channelMean(layer, channels[i]), config);
  });
  const std::size_t n = channels.size();
  std::tie(atlas.rows, atlas.cols) = defaultGridShape(n);
  atlas.cells.assign(atlas.rows * atlas.cols, LayerAtlas::kEmptyCell);
  // t-SNE needs perplexity in (1, n/3).
  if (!similarityOrder || n < 6) {
    for (std::size_t i = 0; i < n; ++i) atlas.cells[i] = i;
    return atlas;
  }
  const Matrix X = atlasActivations(atlas, model);
  std::vector<std::string> ids;
  for (auto c : channels) ids.push_back("channel" + std::to_string(c));
  TsneConfig tsne;
  tsne.seed = config.seed;
  tsne.perplexity = std::min(30.0, std::max(1.5, static_cast<double>(n) / 3.0 - 1.0));
  const auto embedding = embedRows(X, ids, tsne);
  const auto map = gridMap(embedding.points, atlas.rows, atlas.cols);
  for (std::size_t i = 0; i < n; ++i) atlas.cells[map.assignment[i]] = i;
  return atlas;
}

double atlasAdjacencyScore(const LayerAtlas& atlas, const Model& model, std::size_t k) {
  const std::size_t n = atlas.images.size();
  if (n < 2) return 1.0;
  k = std::min(k, n - 1);
  const Matrix D2 = pairwiseSquaredDistances(atlasActivations(atlas, model));
  std::vector<std::size_t> cellOf(n);
  for (std::size_t cell = 0; cell < atlas.cells.size(); ++cell) {
    if (atlas.cells[cell] != LayerAtlas::kEmptyCell) cellOf[atlas.cells[cell]] = cell;
  }
  std::size_t good = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d.push_back({D2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), j});
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end());
    const long ri = static_cast<long>(cellOf[i] / atlas.cols), ci = static_cast<long>(cellOf[i] % atlas.cols);
    for (std::size_t t = 0; t < k; ++t) {
      const long rj = static_cast<long>(cellOf[d[t].second] / atlas.cols);
      const long cj = static_cast<long>(cellOf[d[t].second] % atlas.cols);
      if (std::max(std::abs(ri - rj), std::abs(ci - cj)) == 1) {
        ++good;
        break;
      }
    }
  }
  return static_cast<double>(good) / static_cast<double>(n);
}

}  // namespace fscope
