#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "featurescope/dataset.hpp"
#include "featurescope/model.hpp"

namespace fscope {

struct TrainConfig {
  double learningRate = 0.01;
  double lrDecay = 1.0;  // learning rate multiplier applied after every epoch
  double momentum = 0.9;
  double dropout = 0.25;
  std::size_t epochs = 12;
  std::size_t batchSize = 32;
  std::uint64_t seed = 0;
  std::size_t patience = 10;  // epochs without validation improvement
  bool augment = true;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double trainLoss = 0.0;
  double trainAccuracy = 0.0;
  double valAccuracy = 0.0;
};

struct TrainResult {
  Model model;  // parameters from the best validation epoch
  std::vector<EpochRecord> history;
  std::size_t bestEpoch = 0;
  bool stoppedEarly = false;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// One of the eight square symmetries restricted to {identity, horizontal
/// flip} x {0, 90, 180, 270 degree rotation}.
NdTensor dihedralTransform(const NdTensor& image, bool flip, int quarterTurns);
NdTensor augment(const NdTensor& image, Rng& rng);

/// Mini-batch SGD with momentum on cross-entropy. Uses the Train split for
/// updates and the Val split for early stopping; bit-reproducible per seed.
TrainResult train(const Model& initial, const LabeledImageSet& data, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& onEpoch = {});

/// Applies one momentum step in place: v = m*v - lr*g; p += v.
void momentumStep(ModelParameters& params, ModelParameters& velocity,
                  const ParameterGradients& grads, double learningRate, double momentum);

struct Prediction {
  std::size_t predicted = 0;
  std::array<double, 2> probabilities{};
  double certainty() const { return probabilities[predicted]; }
};

std::vector<Prediction> predict(const Model& model, const LabeledImageSet& data,
                                const std::vector<std::size_t>& indices);

struct ConfusionMatrix {
  std::array<std::array<std::size_t, 2>, 2> counts{};  // [true][predicted]
  std::array<double, 2> perClassAccuracy{};
  double overall = 0.0;

  std::size_t total() const;
  static ConfusionMatrix fromLabels(const std::vector<std::size_t>& truth,
                                    const std::vector<std::size_t>& predicted);
};

ConfusionMatrix evaluate(const Model& model, const LabeledImageSet& data,
                         const std::vector<std::size_t>& indices);

// Checkpoint: "FSCP", u16 version, layer manifest, then little-endian
// float64 parameters in manifest order.
inline constexpr std::uint16_t kCheckpointVersion = 1;

void saveCheckpoint(const Model& model, const std::filesystem::path& path);
Model loadCheckpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serializeCheckpoint(const Model& model);
Model deserializeCheckpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace fscope
