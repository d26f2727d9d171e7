#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "featurescope/dataset.hpp"
#include "featurescope/featurevis.hpp"
#include "featurescope/model.hpp"
#include "featurescope/tsne.hpp"

namespace fscope {

// ---------------------------------------------------------------------------
// Activation maps and rendering

struct ActivationMap {
  std::size_t layer = 0;
  std::size_t channel = 0;
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // height x width, row-major
};

/// Spatial slice of one channel from an H x W x C activation (a dense
/// layer gives a 1 x 1 map).
ActivationMap channelMap(const NdTensor& activation, std::size_t layer, std::size_t channel);

/// Fully saturated RGB colour for a hue in turns, [0, 1).
std::array<double, 3> hueToRgb(double hue);

struct ChannelRender {
  std::vector<double> hues;        // turns, channel c at c / n
  std::vector<NdTensor> tints;     // per channel, H x W x 3
  NdTensor composite;              // H x W x 3, clipped sum of tints
};

/// Normalizes each channel of an H x W x C tensor to max 1 (zero channels
/// stay zero) and tints it with evenly spaced hues.
ChannelRender renderChannels(const NdTensor& hwc);
ChannelRender renderChannelActivations(const ForwardTrace& trace, const ModelSpec& spec, std::size_t layer);

// ---------------------------------------------------------------------------
// Activation filtering

double lanczosKernel(double x, int a = 3);

/// Separable Lanczos resampling of a row-major single-channel image with
/// pixel centres aligned; border samples are clamped.
std::vector<double> lanczosResize(const std::vector<double>& src, std::size_t height, std::size_t width,
                                  std::size_t outHeight, std::size_t outWidth, int a = 3);

struct FilterResult {
  NdTensor filtered;
  std::vector<double> mask;  // image-sized, in [0, 1]
  double consistency = 1.0;  // cosine between the channel maps before and after
  bool zeroActivation = false;
};

/// Upscales the channel's activation map for `image` to image size,
/// min-max normalizes it (a uniform map becomes all ones) and multiplies it
/// into every image channel.
FilterResult activationFilter(const NdTensor& image, const Model& model, std::size_t layer, std::size_t channel);

double cosineSimilarity(const std::vector<double>& a, const std::vector<double>& b);

struct ConsistencyReport {
  std::size_t layer = 0;
  std::vector<std::size_t> channels;
  std::vector<double> scores;
  std::vector<bool> zeroActivation;
  double median = 0.0;
};

ConsistencyReport consistencyReport(const Model& model, const LayerAtlas& atlas);

// ---------------------------------------------------------------------------
// Dataset statistics

/// Row i holds the spatially summed activation of every channel for image
/// indices[i].
Matrix channelSums(const Model& model, const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                   std::size_t layer);

struct MaximalImages {
  std::vector<std::size_t> indices;  // dataset indices, best first
  std::vector<std::string> ids;
  std::vector<double> sums;
  std::vector<ActivationMap> maps;
  bool clamped = false;  // topK exceeded the candidate count
};

/// Ranks candidates by total channel activation, descending, ties by id.
MaximalImages maximalImages(const Model& model, const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                            std::size_t layer, std::size_t channel, std::size_t topK);
/// Ranking from precomputed channelSums rows; leaves `maps` empty.
MaximalImages maximalImages(const Matrix& sums, const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                            std::size_t channel, std::size_t topK);

// ---------------------------------------------------------------------------
// Non-negative matrix factorization

struct NmfResult {
  Matrix W;  // rows x rank
  Matrix H;  // rank x cols
  std::vector<double> residualHistory;  // Frobenius residual, initial then after every W or H update
  std::size_t iterations = 0;
  bool converged = false;
};

struct NmfConfig {
  std::size_t maxIterations = 500;
  double tolerance = 1e-6;  // relative residual change per iteration; an exact fit also stops
  std::uint64_t seed = 0;
};

/// Lee-Seung multiplicative updates for min ||A - WH||_F with W, H >= 0.
NmfResult nmf(const Matrix& A, std::size_t rank, const NmfConfig& config = {});

struct NeuronGroups {
  std::size_t layer = 0;
  std::size_t height = 0, width = 0;
  NmfResult factorization;
  std::vector<ActivationMap> groupMaps;          // columns of W
  std::vector<std::vector<double>> directions;   // rows of H
  ChannelRender render;
  std::vector<Objective> objectives() const;
};

constexpr std::size_t kDefaultNeuronGroups = 6;

NeuronGroups factorizeActivations(const ForwardTrace& trace, const ModelSpec& spec, std::size_t layer,
                                  std::size_t groups = kDefaultNeuronGroups, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Density clustering

constexpr int kNoise = -1;

/// Points within eps (inclusive) are neighbours; minPts counts the point
/// itself. Clusters are numbered in discovery order scanning by index, and
/// a border point joins the first cluster that reaches it.
std::vector<int> dbscan(const std::vector<Point2>& points, double eps, std::size_t minPts);

/// Sorted distances from each point to its minPts-th nearest point,
/// counting the point itself.
std::vector<double> kDistances(const std::vector<Point2>& points, std::size_t minPts);

/// Knee of the sorted k-distance curve: the sample farthest from the chord
/// joining its ends.
double kneeEps(const std::vector<Point2>& points, std::size_t minPts = 5);

// ---------------------------------------------------------------------------
// Cluster weights

struct ClusterWeights {
  std::vector<double> weights;
  std::vector<double> clusterMedian;
  std::vector<double> datasetMedian;
  std::vector<double> datasetStd;  // population standard deviation
  bool zeroVector = false;         // nothing over-expressed; weights left unnormalized
};

double median(std::vector<double> values);

/// `sums` holds one row per dataset image; `members` selects the cluster rows.
ClusterWeights clusterWeights(const Matrix& sums, const std::vector<std::size_t>& members);

/// Cluster given by image ids, statistics over `indices`.
ClusterWeights clusterWeights(const std::vector<std::string>& clusterIds, std::size_t layer, const Model& model,
                              const LabeledImageSet& set, const std::vector<std::size_t>& indices);

struct ClusterVisualization {
  double eps = 0.0;
  std::size_t minPts = 0;
  std::vector<int> labels;  // per embedded point, kNoise for noise
  std::size_t clusterCount = 0;
  std::vector<ClusterWeights> weights;
  std::vector<std::optional<FeatureImage>> images;  // none for zero-weight clusters
  std::string advisory;
};

/// `indices[k]` is the dataset image behind embedded point k. An eps of 0
/// selects the knee of the k-distance curve.
ClusterVisualization visualizeClusters(const Embedding2D& embedding, const LabeledImageSet& set,
                                       const std::vector<std::size_t>& indices, const Model& model,
                                       std::size_t layer, double eps, std::size_t minPts,
                                       const VisConfig& visConfig, bool generateImages = true);

}  // namespace fscope
