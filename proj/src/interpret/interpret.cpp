#include "featurescope/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <numeric>

#include "featurescope/parallel.hpp"
#include "featurescope/random.hpp"

namespace fscope {

namespace {

struct Geometry {
  std::size_t height = 1, width = 1, channels = 0;
};

Geometry geometry(const Shape& shape) {
  if (shape.size() == 3) return {shape[0], shape[1], shape[2]};
  if (shape.size() == 1) return {1, 1, shape[0]};
  throw ShapeError("expected an HxWxC or vector activation, got " + shapeToString(shape));
}

double frobenius(const Matrix& A, const Matrix& W, const Matrix& H) { return (A - W * H).norm(); }

}  // namespace

// ---------------------------------------------------------------------------
// Rendering

ActivationMap channelMap(const NdTensor& activation, std::size_t layer, std::size_t channel) {
  const auto g = geometry(activation.shape());
  if (channel >= g.channels) {
    throw Error("channel " + std::to_string(channel) + " out of range for " + std::to_string(g.channels) +
                " channels");
  }
  ActivationMap m;
  m.layer = layer;
  m.channel = channel;
  m.height = g.height;
  m.width = g.width;
  m.values.resize(g.height * g.width);
  for (std::size_t p = 0; p < m.values.size(); ++p) m.values[p] = activation[p * g.channels + channel];
  return m;
}

std::array<double, 3> hueToRgb(double hue) {
  const double h = 6.0 * (hue - std::floor(hue));
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

ChannelRender renderChannels(const NdTensor& hwc) {
  const auto g = geometry(hwc.shape());
  ChannelRender out;
  out.composite = NdTensor({g.height, g.width, 3});
  for (std::size_t c = 0; c < g.channels; ++c) {
    out.hues.push_back(static_cast<double>(c) / static_cast<double>(g.channels));
    const auto rgb = hueToRgb(out.hues.back());
    double peak = 0.0;
    for (std::size_t p = 0; p < g.height * g.width; ++p) peak = std::max(peak, hwc[p * g.channels + c]);
    NdTensor tint({g.height, g.width, 3});
    if (peak > 0.0) {
      for (std::size_t p = 0; p < g.height * g.width; ++p) {
        const double v = std::max(0.0, hwc[p * g.channels + c]) / peak;
        for (int k = 0; k < 3; ++k) tint[3 * p + k] = v * rgb[k];
      }
    }
    for (std::size_t i = 0; i < tint.size(); ++i) out.composite[i] += tint[i];
    out.tints.push_back(std::move(tint));
  }
  for (double& v : out.composite.values()) v = std::min(v, 1.0);
  return out;
}

ChannelRender renderChannelActivations(const ForwardTrace& trace, const ModelSpec& spec, std::size_t layer) {
  return renderChannels(trace.featureActivation(spec, layer));
}

// ---------------------------------------------------------------------------
// Activation filtering

double lanczosKernel(double x, int a) {
  if (x == 0.0) return 1.0;
  if (std::abs(x) >= a) return 0.0;
  const double px = std::numbers::pi * x;
  return a * std::sin(px) * std::sin(px / a) / (px * px);
}

std::vector<double> lanczosResize(const std::vector<double>& src, std::size_t height, std::size_t width,
                                  std::size_t outHeight, std::size_t outWidth, int a) {
  if (src.size() != height * width || height == 0 || width == 0) {
    throw ShapeError("Lanczos source has " + std::to_string(src.size()) + " values, expected " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  // Weights for one axis: out index -> (first source index, weights).
  auto axis = [a](std::size_t in, std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double centre = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      const long lo = static_cast<long>(std::floor(centre)) - a + 1;
      double total = 0.0;
      std::vector<std::pair<std::size_t, double>> t;
      for (long s = lo; s < lo + 2 * a; ++s) {
        const double w = lanczosKernel(centre - static_cast<double>(s), a);
        if (w == 0.0) continue;
        const auto idx = static_cast<std::size_t>(std::clamp(s, 0L, static_cast<long>(in) - 1));
        t.push_back({idx, w});
        total += w;
      }
      for (auto& [i, w] : t) w /= total;
      taps[o] = std::move(t);
    }
    return taps;
  };
  const auto ty = axis(height, outHeight), tx = axis(width, outWidth);
  std::vector<double> rows(height * outWidth, 0.0), out(outHeight * outWidth, 0.0);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < outWidth; ++x) {
      double s = 0.0;
      for (auto [i, w] : tx[x]) s += w * src[y * width + i];
      rows[y * outWidth + x] = s;
    }
  for (std::size_t y = 0; y < outHeight; ++y)
    for (std::size_t x = 0; x < outWidth; ++x) {
      double s = 0.0;
      for (auto [i, w] : ty[y]) s += w * rows[i * outWidth + x];
      out[y * outWidth + x] = s;
    }
  return out;
}

double cosineSimilarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine similarity of vectors with different lengths");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return aa == bb ? 1.0 : 0.0;
  return ab / std::sqrt(aa * bb);
}

FilterResult activationFilter(const NdTensor& image, const Model& model, std::size_t layer, std::size_t channel) {
  if (image.shape() != model.spec.inputShape) {
    throw ShapeError("image " + shapeToString(image.shape()) + " does not match model input " +
                     shapeToString(model.spec.inputShape));
  }
  const auto map = channelMap(forwardToLayer(model, image, layer).featureActivation(model.spec, layer), layer, channel);
  FilterResult out;
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (std::all_of(map.values.begin(), map.values.end(), [](double v) { return v == 0.0; })) {
    out.filtered = image;
    out.mask.assign(H * W, 1.0);
    out.zeroActivation = true;
    return out;
  }
  out.mask = lanczosResize(map.values, map.height, map.width, H, W);
  const auto [lo, hi] = std::minmax_element(out.mask.begin(), out.mask.end());
  const double mn = *lo, mx = *hi;
  for (double& v : out.mask) v = mx > mn ? (v - mn) / (mx - mn) : 1.0;
  out.filtered = image;
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t c = 0; c < C; ++c) out.filtered[p * C + c] *= out.mask[p];
  const auto after =
      channelMap(forwardToLayer(model, out.filtered, layer).featureActivation(model.spec, layer), layer, channel);
  out.consistency = cosineSimilarity(map.values, after.values);
  return out;
}

ConsistencyReport consistencyReport(const Model& model, const LayerAtlas& atlas) {
  ConsistencyReport report;
  report.layer = atlas.layer;
  report.channels = atlas.channels;
  report.scores.resize(atlas.images.size());
  std::vector<char> zero(atlas.images.size(), 0);
  parallelFor(atlas.images.size(), [&](std::size_t i) {
    const auto r = activationFilter(atlas.images[i].pixels, model, atlas.layer, atlas.channels[i]);
    report.scores[i] = r.consistency;
    zero[i] = r.zeroActivation;
  });
  report.zeroActivation.assign(zero.begin(), zero.end());
  if (!report.scores.empty()) report.median = median(report.scores);
  return report;
}

// ---------------------------------------------------------------------------
// Dataset statistics

Matrix channelSums(const Model& model, const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                   std::size_t layer) {
  const auto layers = model.spec.featureLayers();
  if (layer >= layers.size()) throw Error("layer " + std::to_string(layer) + " out of range");
  const auto g = geometry(layers[layer].shape);
  Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(g.channels));
  parallelFor(indices.size(), [&](std::size_t i) {
    const auto trace = forwardToLayer(model, set.images.at(indices[i]).pixels, layer);
    const auto& act = trace.featureActivation(model.spec, layer);
    for (std::size_t p = 0; p < g.height * g.width; ++p)
      for (std::size_t c = 0; c < g.channels; ++c) sums(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) += act[p * g.channels + c];
  });
  return sums;
}

MaximalImages maximalImages(const Matrix& sums, const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                            std::size_t channel, std::size_t topK) {
  if (static_cast<std::size_t>(sums.rows()) != indices.size()) throw ShapeError("one sums row is needed per candidate");
  if (channel >= static_cast<std::size_t>(sums.cols())) {
    throw Error("channel " + std::to_string(channel) + " out of range for " + std::to_string(sums.cols()) + " channels");
  }
  std::vector<std::size_t> order(indices.size());
  std::iota(order.begin(), order.end(), 0);
  const auto col = static_cast<Eigen::Index>(channel);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = sums(static_cast<Eigen::Index>(a), col), sb = sums(static_cast<Eigen::Index>(b), col);
    if (sa != sb) return sa > sb;
    return set.images[indices[a]].id < set.images[indices[b]].id;
  });
  MaximalImages out;
  out.clamped = topK > order.size();
  const std::size_t k = std::min(topK, order.size());
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t idx = indices[order[r]];
    out.indices.push_back(idx);
    out.ids.push_back(set.images[idx].id);
    out.sums.push_back(sums(static_cast<Eigen::Index>(order[r]), col));
  }
  return out;
}

MaximalImages maximalImages(const Model& model, const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                            std::size_t layer, std::size_t channel, std::size_t topK) {
  auto out = maximalImages(channelSums(model, set, indices, layer), set, indices, channel, topK);
  for (auto idx : out.indices) {
    out.maps.push_back(
        channelMap(forwardToLayer(model, set.images[idx].pixels, layer).featureActivation(model.spec, layer), layer, channel));
  }
  return out;
}

// ---------------------------------------------------------------------------
// NMF

NmfResult nmf(const Matrix& A, std::size_t rank, const NmfConfig& config) {
  if (rank == 0) throw Error("NMF rank must be positive");
  if (rank > static_cast<std::size_t>(A.cols())) {
    throw Error("NMF rank " + std::to_string(rank) + " exceeds the " + std::to_string(A.cols()) + " channels");
  }
  if (A.size() == 0) throw ShapeError("NMF of an empty matrix");
  if (!(A.minCoeff() >= 0.0) || !A.allFinite()) throw Error("NMF needs a finite non-negative matrix");
  const auto r = static_cast<Eigen::Index>(rank);
  Rng rng(config.seed);
  // Uniform start scaled so W H matches the mean of A.
  const double scale = std::sqrt(std::max(A.mean(), 1e-12) / static_cast<double>(rank));
  NmfResult out;
  out.W.resize(A.rows(), r);
  out.H.resize(r, A.cols());
  for (Eigen::Index i = 0; i < out.W.size(); ++i) out.W.data()[i] = scale * uniform01(rng);
  for (Eigen::Index i = 0; i < out.H.size(); ++i) out.H.data()[i] = scale * uniform01(rng);
  Matrix& W = out.W;
  Matrix& H = out.H;
  out.residualHistory.push_back(frobenius(A, W, H));
  const double exactFit = 1e-12 * A.norm();
  auto multiply = [](Matrix& X, const Matrix& num, const Matrix& den) {
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (Eigen::Index j = 0; j < X.cols(); ++j)
        if (den(i, j) > 0.0) X(i, j) *= num(i, j) / den(i, j);
  };
  for (std::size_t it = 0; it < config.maxIterations; ++it) {
    const double before = out.residualHistory.back();
    {
      const Matrix WtA = W.transpose() * A;
      const Matrix WtWH = (W.transpose() * W) * H;
      multiply(H, WtA, WtWH);
    }
    out.residualHistory.push_back(frobenius(A, W, H));
    {
      const Matrix AHt = A * H.transpose();
      const Matrix WHHt = W * (H * H.transpose());
      multiply(W, AHt, WHHt);
    }
    const double after = frobenius(A, W, H);
    out.residualHistory.push_back(after);
    out.iterations = it + 1;
    if (after <= exactFit || std::abs(before - after) / before < config.tolerance) {
      out.converged = true;
      break;
    }
  }
  return out;
}

std::vector<Objective> NeuronGroups::objectives() const {
  std::vector<Objective> out;
  for (const auto& d : directions) out.push_back(Objective::neuronGroup(layer, d));
  return out;
}

NeuronGroups factorizeActivations(const ForwardTrace& trace, const ModelSpec& spec, std::size_t layer,
                                  std::size_t groups, std::uint64_t seed) {
  const auto& act = trace.featureActivation(spec, layer);
  const auto g = geometry(act.shape());
  if (act.rank() != 3) throw Error("neuron groups need a spatial layer");
  if (groups > g.channels) {
    throw Error("cannot form " + std::to_string(groups) + " groups from " + std::to_string(g.channels) + " channels");
  }
  for (double v : act.values()) {
    if (v < 0.0) throw Error("activations must be non-negative to factorize");
  }
  const Matrix A = Eigen::Map<const Matrix>(act.data(), static_cast<Eigen::Index>(g.height * g.width),
                                            static_cast<Eigen::Index>(g.channels));
  NeuronGroups out;
  out.layer = layer;
  out.height = g.height;
  out.width = g.width;
  NmfConfig cfg;
  cfg.seed = seed;
  out.factorization = nmf(A, groups, cfg);
  NdTensor groupTensor({g.height, g.width, groups});
  for (std::size_t k = 0; k < groups; ++k) {
    ActivationMap m;
    m.layer = layer;
    m.channel = k;
    m.height = g.height;
    m.width = g.width;
    for (std::size_t p = 0; p < g.height * g.width; ++p) {
      const double v = out.factorization.W(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
      m.values.push_back(v);
      groupTensor[p * groups + k] = v;
    }
    out.groupMaps.push_back(std::move(m));
    std::vector<double> d(g.channels);
    for (std::size_t c = 0; c < g.channels; ++c) {
      d[c] = out.factorization.H(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    }
    out.directions.push_back(std::move(d));
  }
  out.render = renderChannels(groupTensor);
  return out;
}

// ---------------------------------------------------------------------------
// DBSCAN

std::vector<int> dbscan(const std::vector<Point2>& points, double eps, std::size_t minPts) {
  if (!(eps > 0.0)) throw Error("DBSCAN eps must be positive");
  if (minPts < 1) throw Error("DBSCAN minPts must be at least 1");
  const std::size_t n = points.size();
  const double eps2 = eps * eps;
  std::vector<std::vector<std::size_t>> neighbours(n);
  parallelFor(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = points[i][0] - points[j][0], dy = points[i][1] - points[j][1];
      if (dx * dx + dy * dy <= eps2) neighbours[i].push_back(j);
    }
  });
  constexpr int kUnvisited = -2;
  std::vector<int> labels(n, kUnvisited);
  int cluster = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kUnvisited) continue;
    if (neighbours[i].size() < minPts) {
      labels[i] = kNoise;
      continue;
    }
    labels[i] = cluster;
    std::deque<std::size_t> queue(neighbours[i].begin(), neighbours[i].end());
    while (!queue.empty()) {
      const std::size_t j = queue.front();
      queue.pop_front();
      if (labels[j] == kNoise) labels[j] = cluster;  // border point
      if (labels[j] != kUnvisited) continue;
      labels[j] = cluster;
      if (neighbours[j].size() >= minPts) queue.insert(queue.end(), neighbours[j].begin(), neighbours[j].end());
    }
    ++cluster;
  }
  return labels;
}

std::vector<double> kDistances(const std::vector<Point2>& points, std::size_t minPts) {
  const std::size_t n = points.size();
  if (minPts < 1 || minPts > n) throw Error("k-distance needs 1 <= minPts <= point count");
  std::vector<double> out(n);
  parallelFor(n, [&](std::size_t i) {
    std::vector<double> d(n);
    for (std::size_t j = 0; j < n; ++j) d[j] = std::hypot(points[i][0] - points[j][0], points[i][1] - points[j][1]);
    std::nth_element(d.begin(), d.begin() + static_cast<long>(minPts - 1), d.end());
    out[i] = d[minPts - 1];
  });
  std::sort(out.begin(), out.end());
  return out;
}

double kneeEps(const std::vector<Point2>& points, std::size_t minPts) {
  const auto d = kDistances(points, minPts);
  const std::size_t n = d.size();
  if (n < 3 || d.back() == d.front()) {
    const double e = d.back();
    return e > 0.0 ? e : 1e-9;
  }
  // Both axes scaled to [0, 1] so the chord distance is scale free.
  const double span = d.back() - d.front();
  double best = -1.0;
  std::size_t knee = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) / static_cast<double>(n - 1);
    const double y = (d[i] - d.front()) / span;
    const double dist = x - y;  // distance below the diagonal, up to a constant
    if (dist > best) {
      best = dist;
      knee = i;
    }
  }
  return d[knee] > 0.0 ? d[knee] : 1e-9;
}

// ---------------------------------------------------------------------------
// Cluster weights

double median(std::vector<double> values) {
  if (values.empty()) throw Error("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ClusterWeights clusterWeights(const Matrix& sums, const std::vector<std::size_t>& members) {
  if (members.empty()) throw Error("cluster weights need a non-empty cluster");
  const auto n = static_cast<std::size_t>(sums.rows());
  const auto C = static_cast<std::size_t>(sums.cols());
  ClusterWeights out;
  out.weights.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    std::vector<double> all(n), cluster;
    for (std::size_t i = 0; i < n; ++i) all[i] = sums(static_cast<Eigen::Index>(i), col);
    for (auto m : members) {
      if (m >= n) throw Error("cluster member " + std::to_string(m) + " out of range");
      cluster.push_back(all[m]);
    }
    const double mean = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : all) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    out.clusterMedian.push_back(median(cluster));
    out.datasetMedian.push_back(median(all));
    out.datasetStd.push_back(sd);
    if (sd > 0.0) out.weights[c] = std::max(0.0, (out.clusterMedian[c] - out.datasetMedian[c]) / sd);
  }
  double norm = 0.0;
  for (double w : out.weights) norm += w * w;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    out.zeroVector = true;
  } else {
    for (double& w : out.weights) w /= norm;
  }
  return out;
}

ClusterWeights clusterWeights(const std::vector<std::string>& clusterIds, std::size_t layer, const Model& model,
                              const LabeledImageSet& set, const std::vector<std::size_t>& indices) {
  if (clusterIds.empty()) throw Error("cluster weights need a non-empty cluster");
  std::vector<std::size_t> members;
  for (const auto& id : clusterIds) {
    std::size_t found = indices.size();
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (set.images.at(indices[k]).id == id) found = k;
    }
    if (found == indices.size()) throw Error("cluster image '" + id + "' is not among the statistics images");
    members.push_back(found);
  }
  return clusterWeights(channelSums(model, set, indices, layer), members);
}

ClusterVisualization visualizeClusters(const Embedding2D& embedding, const LabeledImageSet& set,
                                       const std::vector<std::size_t>& indices, const Model& model,
                                       std::size_t layer, double eps, std::size_t minPts,
                                       const VisConfig& visConfig, bool generateImages) {
  if (indices.size() != embedding.points.size()) throw Error("one dataset image is needed per embedded point");
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (set.images.at(indices[k]).id != embedding.pointIds[k]) {
      throw Error("embedded point " + std::to_string(k) + " does not match image '" + set.images[indices[k]].id + "'");
    }
  }
  ClusterVisualization out;
  out.minPts = minPts;
  out.eps = eps > 0.0 ? eps : kneeEps(embedding.points, minPts);
  out.labels = dbscan(embedding.points, out.eps, minPts);
  for (int l : out.labels) out.clusterCount = std::max<std::size_t>(out.clusterCount, static_cast<std::size_t>(l + 1));
  if (out.clusterCount == 0) {
    out.advisory = "no clusters found";
    return out;
  }
  const Matrix sums = channelSums(model, set, indices, layer);
  std::vector<std::vector<std::size_t>> members(out.clusterCount);
  for (std::size_t k = 0; k < out.labels.size(); ++k) {
    if (out.labels[k] >= 0) members[static_cast<std::size_t>(out.labels[k])].push_back(k);
  }
  for (const auto& m : members) out.weights.push_back(clusterWeights(sums, m));
  out.images.resize(out.clusterCount);
  if (!generateImages) return out;
  parallelFor(out.clusterCount, [&](std::size_t c) {
    if (out.weights[c].zeroVector) return;
    out.images[c] = optimize(model, Objective::weightedChannels(layer, out.weights[c].weights), visConfig);
  });
  for (std::size_t c = 0; c < out.clusterCount; ++c) {
    if (out.weights[c].zeroVector) {
      if (!out.advisory.empty()) out.advisory += "; ";
      out.advisory += "cluster " + std::to_string(c) + " over-expresses no channel";
    }
  }
  return out;
}

}  // namespace fscope
