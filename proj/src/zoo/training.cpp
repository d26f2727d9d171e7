#include "featurescope/training.hpp"

#include <cmath>

#include "featurescope/parallel.hpp"

namespace fscope {

void TrainConfig::validate() const {
  if (!(learningRate >= 0.0)) throw Error("learning rate must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must be in [0,1)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must be in [0,1)");
  if (!(lrDecay > 0.0 && lrDecay <= 1.0)) throw Error("learning-rate decay must lie in (0, 1]");
  if (epochs == 0 || batchSize == 0) throw Error("epochs and batch size must be positive");
}

NdTensor dihedralTransform(const NdTensor& image, bool flip, int quarterTurns) {
  if (image.rank() != 3 || image.dim(0) != image.dim(1)) {
    throw ShapeError("augmentation expects a square H x W x C image");
  }
  const std::size_t n = image.dim(0), C = image.dim(2);
  const int turns = ((quarterTurns % 4) + 4) % 4;
  NdTensor out(image.shape());
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      // Source coordinate for output (y, x): undo rotation, then the flip.
      std::size_t sy = y, sx = x;
      for (int t = 0; t < turns; ++t) {
        const std::size_t ny = sx, nx = n - 1 - sy;  // inverse of a 90 degree turn
        sy = ny;
        sx = nx;
      }
      if (flip) sx = n - 1 - sx;
      for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

NdTensor augment(const NdTensor& image, Rng& rng) {
  const bool flip = uniformIndex(rng, 2) == 1;
  const int turns = static_cast<int>(uniformIndex(rng, 4));
  return dihedralTransform(image, flip, turns);
}

void momentumStep(ModelParameters& params, ModelParameters& velocity,
                  const ParameterGradients& grads, double learningRate, double momentum) {
  for (std::size_t l = 0; l < params.perLayer.size(); ++l) {
    auto step = [&](NdTensor& p, NdTensor& v, const NdTensor& g) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = momentum * v[k] - learningRate * g[k];
        p[k] += v[k];
      }
    };
    step(params.perLayer[l].weights, velocity.perLayer[l].weights, grads.perLayer[l].weights);
    step(params.perLayer[l].bias, velocity.perLayer[l].bias, grads.perLayer[l].bias);
  }
}

std::vector<Prediction> predict(const Model& model, const LabeledImageSet& data,
                                const std::vector<std::size_t>& indices) {
  std::vector<Prediction> out(indices.size());
  parallelFor(indices.size(), [&](std::size_t k) {
    const auto trace = forward(model, data.images.at(indices[k]).pixels);
    Prediction p;
    p.probabilities = {trace.probabilities[0], trace.probabilities[1]};
    p.predicted = p.probabilities[1] > p.probabilities[0] ? 1 : 0;
    out[k] = p;
  });
  return out;
}

std::size_t ConfusionMatrix::total() const {
  return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
}

ConfusionMatrix ConfusionMatrix::fromLabels(const std::vector<std::size_t>& truth,
                                            const std::vector<std::size_t>& predicted) {
  if (truth.empty()) throw Error("cannot evaluate on an empty test set");
  if (truth.size() != predicted.size()) throw Error("label and prediction counts differ");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truth.size(); ++i) ++m.counts.at(truth[i]).at(predicted[i]);
  for (std::size_t c = 0; c < 2; ++c) {
    const std::size_t row = m.counts[c][0] + m.counts[c][1];
    m.perClassAccuracy[c] = row ? static_cast<double>(m.counts[c][c]) / row : 0.0;
  }
  m.overall = static_cast<double>(m.counts[0][0] + m.counts[1][1]) / truth.size();
  return m;
}

ConfusionMatrix evaluate(const Model& model, const LabeledImageSet& data,
                         const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error("cannot evaluate on an empty test set");
  const auto predictions = predict(model, data, indices);
  std::vector<std::size_t> truth, predicted;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    truth.push_back(static_cast<std::size_t>(data.images[indices[k]].label));
    predicted.push_back(predictions[k].predicted);
  }
  return ConfusionMatrix::fromLabels(truth, predicted);
}

TrainResult train(const Model& initial, const LabeledImageSet& data, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& onEpoch) {
  config.validate();
  auto trainIdx = data.indicesOf(Split::Train);
  const auto valIdx = data.indicesOf(Split::Val);
  if (trainIdx.empty()) throw Error("training needs images tagged train");

  Model model = initial;
  for (auto& layer : model.spec.layers) {
    if (layer.kind == LayerKind::Dropout) layer.rate = config.dropout;
  }
  model.validate();
  auto velocity = model.zeroParameters();
  const std::size_t logitsOp = model.spec.logitsOp();

  TrainResult result;
  result.model = model;
  double bestVal = -1.0;
  std::size_t sinceBest = 0;
  Rng rng(config.seed);
  double learningRate = config.learningRate;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (epoch > 1) learningRate *= config.lrDecay;
    shuffle(trainIdx, rng);
    double lossSum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < trainIdx.size(); start += config.batchSize) {
      const std::size_t end = std::min(start + config.batchSize, trainIdx.size());
      const double scale = 1.0 / static_cast<double>(end - start);
      auto grads = model.zeroParameters();
      for (std::size_t k = start; k < end; ++k) {
        const auto& cell = data.images[trainIdx[k]];
        const NdTensor input = config.augment ? augment(cell.pixels, rng) : cell.pixels;
        ForwardOptions options;
        options.captureAll = true;
        options.training = true;
        options.rng = &rng;
        const auto trace = forward(model, input, options);
        const std::size_t label = static_cast<std::size_t>(cell.label);
        double top = trace.logits[0];
        for (double v : trace.logits.values()) top = std::max(top, v);
        double z = 0.0;
        for (double v : trace.logits.values()) z += std::exp(v - top);
        const double loss = top + std::log(z) - trace.logits[label];
        if (!std::isfinite(loss) || !trace.logits.allFinite()) {
          throw TrainingDiverged("loss is not finite at epoch " + std::to_string(epoch) +
                                 ", sample " + cell.id);
        }
        lossSum += loss;
        const std::size_t predicted = trace.probabilities[1] > trace.probabilities[0] ? 1 : 0;
        if (predicted == label) ++correct;
        NdTensor dLogits = trace.probabilities;
        dLogits[label] -= 1.0;
        for (double& v : dLogits.values()) v *= scale;
        backwardFrom(model, trace, logitsOp, dLogits, &grads, false);
      }
      momentumStep(model.params, velocity, grads, learningRate, config.momentum);
      for (std::size_t l = 0; l < model.params.perLayer.size(); ++l) {
        const auto& p = model.params.perLayer[l];
        if (!p.weights.allFinite() || !p.bias.allFinite()) {
          throw TrainingDiverged("parameters of layer " + std::to_string(l) +
                                 " became non-finite at epoch " + std::to_string(epoch) +
                                 " in the batch containing sample " + data.images[trainIdx[start]].id);
        }
      }
    }

    EpochRecord record;
    record.epoch = epoch;
    record.trainLoss = lossSum / trainIdx.size();
    if (!std::isfinite(record.trainLoss)) {
      throw TrainingDiverged("mean training loss is not finite at epoch " + std::to_string(epoch));
    }
    record.trainAccuracy = static_cast<double>(correct) / trainIdx.size();
    record.valAccuracy = valIdx.empty() ? record.trainAccuracy : evaluate(model, data, valIdx).overall;
    result.history.push_back(record);
    if (onEpoch) onEpoch(record);

    if (record.valAccuracy > bestVal) {
      bestVal = record.valAccuracy;
      result.bestEpoch = epoch;
      result.model = model;
      sinceBest = 0;
    } else if (++sinceBest >= config.patience) {
      result.stoppedEarly = true;
      break;
    }
  }
  return result;
}

}  // namespace fscope
