#include "featurescope/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "featurescope/parallel.hpp"

namespace fscope {

void TsneConfig::validate(std::size_t nPoints) const {
  if (!(perplexity > 1.0)) throw Error("perplexity must exceed 1");
  if (!(perplexity < static_cast<double>(nPoints) / 3.0)) {
    throw Error("perplexity " + std::to_string(perplexity) + " must be below nPoints/3 = " +
                std::to_string(static_cast<double>(nPoints) / 3.0));
  }
  if (iterations == 0) throw Error("t-SNE needs at least one iteration");
  if (!(learningRate > 0.0)) throw Error("t-SNE learning rate must be positive");
  if (!(exaggeration >= 1.0)) throw Error("early exaggeration factor must be at least 1");
}

Matrix flattenLayerActivations(const Model& model, const LabeledImageSet& set,
                               const std::vector<std::size_t>& indices, std::size_t layer) {
  const auto layers = model.spec.featureLayers();
  if (layer >= layers.size()) {
    throw Error("feature layer " + std::to_string(layer) + " out of range (model has " +
                std::to_string(layers.size()) + ")");
  }
  const std::size_t D = shapeProduct(layers[layer].shape);
  Matrix X(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(D));
  parallelFor(indices.size(), [&](std::size_t r) {
    const auto trace = forwardToLayer(model, set.images.at(indices[r]).pixels, layer);
    const auto& a = trace.featureActivation(model.spec, layer);
    std::copy(a.data(), a.data() + D, X.row(static_cast<Eigen::Index>(r)).data());
  });
  return X;
}

namespace {

Eigen::VectorXd rowNorms(const Matrix& X) { return X.rowwise().squaredNorm(); }

void fillBlock(Matrix& out, Eigen::Index r0, Eigen::Index c0, const Matrix& A, const Matrix& B,
               const Eigen::VectorXd& na, const Eigen::VectorXd& nb) {
  const Matrix G = A * B.transpose();
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    for (Eigen::Index j = 0; j < B.rows(); ++j) {
      out(r0 + i, c0 + j) = std::max(0.0, na(i) + nb(j) - 2.0 * G(i, j));
    }
  }
}

}  // namespace

Matrix pairwiseSquaredDistances(const Matrix& X) {
  const auto n = X.rows();
  Matrix D(n, n);
  const auto norms = rowNorms(X);
  fillBlock(D, 0, 0, X, X, norms, norms);
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, i) = 0.0;
    for (Eigen::Index j = 0; j < i; ++j) D(i, j) = D(j, i);  // exact symmetry
  }
  return D;
}

Matrix layerSquaredDistances(const Model& model, const LabeledImageSet& set,
                             const std::vector<std::size_t>& indices, std::size_t layer,
                             std::size_t memoryBudgetBytes) {
  const auto layers = model.spec.featureLayers();
  if (layer >= layers.size()) throw Error("feature layer " + std::to_string(layer) + " out of range");
  const std::size_t D = shapeProduct(layers[layer].shape);
  const std::size_t n = indices.size();
  if (n * D * sizeof(double) <= memoryBudgetBytes) {
    return pairwiseSquaredDistances(flattenLayerActivations(model, set, indices, layer));
  }
  // Two blocks are resident at a time.
  const std::size_t block = std::max<std::size_t>(1, memoryBudgetBytes / (2 * D * sizeof(double)));
  auto slice = [&](std::size_t start) {
    const std::size_t end = std::min(n, start + block);
    return std::vector<std::size_t>(indices.begin() + start, indices.begin() + end);
  };
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < n; a += block) {
    const Matrix Xa = flattenLayerActivations(model, set, slice(a), layer);
    const auto na = rowNorms(Xa);
    fillBlock(out, a, a, Xa, Xa, na, na);
    for (std::size_t b = a + block; b < n; b += block) {
      const Matrix Xb = flattenLayerActivations(model, set, slice(b), layer);
      fillBlock(out, a, b, Xa, Xb, na, rowNorms(Xb));
    }
  }
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out(i, i) = 0.0;
    for (Eigen::Index j = 0; j < i; ++j) out(i, j) = out(j, i);
  }
  return out;
}

Affinities computeAffinities(const Matrix& squaredDistances, double perplexity) {
  const auto n = squaredDistances.rows();
  if (n < 4) throw Error("affinities need at least 4 points");
  if (squaredDistances.cols() != n) throw ShapeError("distance matrix must be square");
  if (!(perplexity > 1.0) || perplexity > static_cast<double>(n - 1)) {
    throw Error("perplexity must lie in (1, N-1]");
  }
  const double targetEntropy = std::log(perplexity);
  Affinities out;
  out.rowPerplexity.assign(n, 0.0);
  out.beta.assign(n, 0.0);
  Matrix conditional = Matrix::Zero(n, n);
  std::vector<std::string> failures(n);

  parallelFor(static_cast<std::size_t>(n), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    double dmin = std::numeric_limits<double>::infinity();
    double mean = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, squaredDistances(i, j));
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) mean += (squaredDistances(i, j) - dmin) / static_cast<double>(n - 1);
    }
    double beta = mean > 0.0 ? 1.0 / mean : 1.0;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    std::vector<double> p(n, 0.0);
    bool converged = false;
    double perp = 0.0;
    for (int step = 0; step < 100; ++step) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) {
          p[j] = 0.0;
          continue;
        }
        const double d = squaredDistances(i, j) - dmin;
        p[j] = std::exp(-beta * d);
        sum += p[j];
        weighted += d * p[j];
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      perp = std::exp(entropy);
      if (std::abs(perp - perplexity) <= 1e-5) {
        for (double& v : p) v /= sum;
        converged = true;
        break;
      }
      if (entropy > targetEntropy) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    if (!converged) {
      failures[row] = "perplexity calibration did not converge for row " + std::to_string(row) +
                      " (reached " + std::to_string(perp) + ", target " + std::to_string(perplexity) + ")";
      return;
    }
    out.rowPerplexity[row] = perp;
    out.beta[row] = beta;
    for (Eigen::Index j = 0; j < n; ++j) conditional(i, j) = p[j];
  });
  for (const auto& f : failures) {
    if (!f.empty()) throw Error(f);
  }
  out.P = Matrix(n, n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = (conditional(i, j) + conditional(j, i)) * scale;
      out.P(i, j) = v;
      out.P(j, i) = v;
    }
  }
  return out;
}

std::vector<Point2> initialLayout(const std::vector<std::string>& pointIds, std::uint64_t seed,
                                  double sigma) {
  std::vector<Point2> y(pointIds.size());
  for (std::size_t i = 0; i < pointIds.size(); ++i) {
    Rng rng(fnv1a(pointIds[i], seed));
    y[i] = {sigma * standardNormal(rng), sigma * standardNormal(rng)};
  }
  return y;
}

namespace {

// Unnormalized Student-t kernel values and their total.
double studentKernel(const std::vector<Point2>& y, Matrix& num) {
  const auto n = static_cast<Eigen::Index>(y.size());
  num.resize(n, n);
  parallelFor(y.size(), [&](std::size_t row) {
    const auto i = static_cast<Eigen::Index>(row);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double dx = y[row][0] - y[j][0], dy = y[row][1] - y[j][1];
      num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + dx * dx + dy * dy);
    }
  });
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) z += num.row(i).sum();
  return z;
}

}  // namespace

double klDivergence(const Matrix& P, const std::vector<Point2>& points) {
  Matrix num;
  const double z = studentKernel(points, num);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      const double p = P(i, j);
      if (i == j || p <= 0.0) continue;
      const double q = std::max(num(i, j) / z, std::numeric_limits<double>::min());
      kl += p * std::log(p / q);
    }
  }
  return kl;
}

std::vector<Point2> klGradient(const Matrix& P, const std::vector<Point2>& y, double exaggeration) {
  std::vector<Point2> grad(y.size());
  klGradient(P, y, exaggeration, grad);
  return grad;
}

void klGradient(const Matrix& P, const std::vector<Point2>& y, double exaggeration,
                std::vector<Point2>& grad) {
  const std::size_t n = y.size();
  Matrix num;
  const double z = studentKernel(y, num);
  grad.resize(n);
  parallelFor(n, [&](std::size_t i) {
    double gx = 0.0, gy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double q = num(i, j);
      const double m = (exaggeration * P(i, j) - q / z) * q;
      gx += m * (y[i][0] - y[j][0]);
      gy += m * (y[i][1] - y[j][1]);
    }
    grad[i] = {4.0 * gx, 4.0 * gy};
  });
}

Embedding2D runTsne(const Matrix& P, const std::vector<std::string>& pointIds,
                    const TsneConfig& config) {
  const std::size_t n = pointIds.size();
  if (static_cast<std::size_t>(P.rows()) != n || P.cols() != P.rows()) {
    throw ShapeError("affinity matrix does not match the point count");
  }
  config.validate(n);
  Embedding2D out;
  out.pointIds = pointIds;
  out.config = config;
  auto y = initialLayout(pointIds, config.seed, config.initialSigma);
  out.initialPoints = y;
  std::vector<Point2> update(n, {0.0, 0.0}), gains(n, {1.0, 1.0}), grad(n);
  out.initialKl = klDivergence(P, y);
  out.klHistory.push_back({0, out.initialKl});

  for (std::size_t it = 0; it < config.iterations; ++it) {
    const double exaggeration = it < config.exaggerationIterations ? config.exaggeration : 1.0;
    const double momentum = it < config.momentumSwitch ? config.initialMomentum : config.finalMomentum;
    klGradient(P, y, exaggeration, grad);
    Point2 mean{0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      for (int d = 0; d < 2; ++d) {
        double& g = gains[i][d];
        g = (grad[i][d] > 0.0) != (update[i][d] > 0.0) ? g + 0.2 : g * 0.8;
        g = std::max(g, 0.01);
        update[i][d] = momentum * update[i][d] - config.learningRate * g * grad[i][d];
        y[i][d] += update[i][d];
        mean[d] += y[i][d];
      }
    }
    for (auto& p : y) {
      for (int d = 0; d < 2; ++d) {
        p[d] -= mean[d] / static_cast<double>(n);
        if (!(std::abs(p[d]) <= 1e8)) {
          throw Error("t-SNE diverged at iteration " + std::to_string(it + 1) +
                      " (coordinates beyond 1e8)");
        }
      }
    }
    const std::size_t done = it + 1;
    if (done == config.exaggerationIterations) out.klAfterExaggeration = klDivergence(P, y);
    if (config.klEvery && done % config.klEvery == 0 && done != config.iterations) {
      out.klHistory.push_back({done, klDivergence(P, y)});
    }
    if (config.snapshotEvery && done % config.snapshotEvery == 0) out.snapshots.push_back({done, y});
  }
  out.finalKl = klDivergence(P, y);
  out.klHistory.push_back({config.iterations, out.finalKl});
  if (config.exaggerationIterations == 0 || config.exaggerationIterations > config.iterations) {
    out.klAfterExaggeration = out.initialKl;
  }
  out.points = std::move(y);
  return out;
}

Embedding2D embedRows(const Matrix& X, const std::vector<std::string>& pointIds,
                      const TsneConfig& config) {
  config.validate(pointIds.size());
  const auto aff = computeAffinities(pairwiseSquaredDistances(X), config.perplexity);
  return runTsne(aff.P, pointIds, config);
}

Embedding2D embedLayer(const Model& model, const LabeledImageSet& set,
                       const std::vector<std::size_t>& indices, std::size_t layer,
                       const TsneConfig& config) {
  config.validate(indices.size());
  std::vector<std::string> ids;
  for (auto i : indices) ids.push_back(set.images.at(i).id);
  const auto D2 = layerSquaredDistances(model, set, indices, layer);
  const auto aff = computeAffinities(D2, config.perplexity);
  auto e = runTsne(aff.P, ids, config);
  e.sourceLayer = layer;
  return e;
}

std::vector<Embedding2D> embedAllLayers(const Model& model, const LabeledImageSet& set,
                                        const std::vector<std::size_t>& indices,
                                        const std::vector<std::size_t>& layers,
                                        const TsneConfig& config) {
  std::vector<Embedding2D> out;
  out.reserve(layers.size());
  for (auto layer : layers) out.push_back(embedLayer(model, set, indices, layer, config));
  return out;
}

double meanSilhouette(const std::vector<Point2>& points, const std::vector<int>& labels) {
  if (points.size() != labels.size()) throw Error("silhouette needs one label per point");
  const std::size_t n = points.size();
  if (n == 0) return 0.0;
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, double> sums;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[labels[j]] += std::hypot(points[i][0] - points[j][0], points[i][1] - points[j][1]);
    }
    const std::size_t own = sizes[labels[i]];
    if (own <= 1 || sizes.size() < 2) continue;  // singleton clusters score 0
    const double a = sums[labels[i]] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, size] : sizes) {
      if (label != labels[i]) b = std::min(b, sums[label] / static_cast<double>(size));
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

}  // namespace fscope
