#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "featurescope/dataset.hpp"
#include "featurescope/model.hpp"

namespace fscope {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Point2 = std::array<double, 2>;

struct TsneConfig {
  std::string algorithm = "tsne";  // provenance tag written to bundles
  double perplexity = 30.0;
  double learningRate = 200.0;
  std::size_t iterations = 1000;
  double exaggeration = 12.0;
  std::size_t exaggerationIterations = 250;
  double initialMomentum = 0.5;
  double finalMomentum = 0.8;
  std::size_t momentumSwitch = 250;
  double initialSigma = 1e-4;
  std::uint64_t seed = 0;
  std::size_t klEvery = 50;        // iterations between KL checkpoints
  std::size_t snapshotEvery = 0;   // 0 disables coordinate snapshots

  void validate(std::size_t nPoints) const;
};

struct KlCheckpoint {
  std::size_t iteration = 0;
  double kl = 0.0;
};

struct Snapshot {
  std::size_t iteration = 0;
  std::vector<Point2> points;
};

struct Embedding2D {
  std::vector<Point2> points;
  std::vector<Point2> initialPoints;
  std::vector<std::string> pointIds;
  std::size_t sourceLayer = 0;
  TsneConfig config;
  std::vector<KlCheckpoint> klHistory;
  double initialKl = 0.0;
  double klAfterExaggeration = 0.0;
  double finalKl = 0.0;
  std::vector<Snapshot> snapshots;
};

/// Row i is the flattened activation of image indices[i] at a feature layer.
Matrix flattenLayerActivations(const Model& model, const LabeledImageSet& set,
                               const std::vector<std::size_t>& indices, std::size_t layer);

Matrix pairwiseSquaredDistances(const Matrix& X);

/// Squared distances between feature-layer activations. Activations are
/// produced in blocks so at most `memoryBudgetBytes` of them are held at once.
Matrix layerSquaredDistances(const Model& model, const LabeledImageSet& set,
                             const std::vector<std::size_t>& indices, std::size_t layer,
                             std::size_t memoryBudgetBytes = std::size_t{512} << 20);

struct Affinities {
  Matrix P;                          // symmetric, sums to 1
  std::vector<double> rowPerplexity; // achieved conditional perplexities
  std::vector<double> beta;          // precision 1/(2 sigma^2) per row
};

/// Conditional Gaussian affinities calibrated per row by bisection, then
/// symmetrized p_ij = (p_j|i + p_i|j) / 2N.
Affinities computeAffinities(const Matrix& squaredDistances, double perplexity);

/// Deterministic start: point i is drawn from a stream seeded by (seed, id).
std::vector<Point2> initialLayout(const std::vector<std::string>& pointIds, std::uint64_t seed,
                                  double sigma);

double klDivergence(const Matrix& P, const std::vector<Point2>& points);

/// Gradient of KL(P || Q) with respect to each embedded point, with P scaled
/// by `exaggeration`.
std::vector<Point2> klGradient(const Matrix& P, const std::vector<Point2>& y, double exaggeration = 1.0);
void klGradient(const Matrix& P, const std::vector<Point2>& y, double exaggeration,
                std::vector<Point2>& grad);

Embedding2D runTsne(const Matrix& P, const std::vector<std::string>& pointIds,
                    const TsneConfig& config);

/// Convenience: distances, affinities and optimization for raw rows.
Embedding2D embedRows(const Matrix& X, const std::vector<std::string>& pointIds,
                      const TsneConfig& config);

Embedding2D embedLayer(const Model& model, const LabeledImageSet& set,
                       const std::vector<std::size_t>& indices, std::size_t layer,
                       const TsneConfig& config);

/// One embedding per requested layer, all with the same seed.
std::vector<Embedding2D> embedAllLayers(const Model& model, const LabeledImageSet& set,
                                        const std::vector<std::size_t>& indices,
                                        const std::vector<std::size_t>& layers,
                                        const TsneConfig& config);

/// Mean silhouette width of a labelled 2-D point set.
double meanSilhouette(const std::vector<Point2>& points, const std::vector<int>& labels);

}  // namespace fscope
