#pragma once

#include <cstddef>
#include <vector>

#include "featurescope/lap.hpp"
#include "featurescope/training.hpp"
#include "featurescope/tsne.hpp"

namespace fscope {

// ---------------------------------------------------------------------------
// Point decorations

struct DecorConfig {
  double radiusMin = 2.0;
  double radiusMax = 8.0;
};

struct PointDecor {
  std::size_t predictedClass = 0;
  std::size_t trueClass = 0;
  bool misclassified = false;
  double certainty = 0.5;  // max softmax probability
  double radiusCertainty = 0.0;
  double radiusUncertainty = 0.0;
};

/// `indices[k]` is the dataset image behind embedded point k and
/// `predictions[k]` its model output.
std::vector<PointDecor> decoratePoints(const Embedding2D& embedding, const LabeledImageSet& set,
                                       const std::vector<std::size_t>& indices,
                                       const std::vector<Prediction>& predictions,
                                       const DecorConfig& config = {});

// ---------------------------------------------------------------------------
// Decision boundary

struct BoundaryConfig {
  std::size_t gx = 64;
  std::size_t gy = 64;
  std::size_t k = 3;
  double smoothSigma = 1.5;  // in cells; 0 disables smoothing
};

using Polyline = std::vector<Point2>;

struct BoundaryRaster {
  std::size_t gx = 0, gy = 0;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  std::vector<int> labels;      // gy x gx, row-major, 0 or 1
  std::vector<double> smoothed; // gy x gx, the +-1 label field after blurring
  std::vector<Polyline> contour;

  Point2 cellCentre(std::size_t row, std::size_t col) const;
};

/// Labels each raster cell by majority vote of its k nearest points
/// (distance ties go to the lower index; vote ties to the nearest point),
/// smooths the +-1 field and traces its zero level by marching squares.
BoundaryRaster estimateBoundary(const std::vector<Point2>& points, const std::vector<int>& labels,
                                const BoundaryConfig& config = {});

std::vector<Polyline> marchingSquares(const std::vector<double>& field, std::size_t gx,
                                      std::size_t gy, const std::vector<Point2>& centres);

// ---------------------------------------------------------------------------
// Grid mapping

struct GridMap {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> assignment;  // point -> cell index (row * cols + col)
  std::vector<Point2> gridCoords;       // assigned cell centre per point
  double cost = 0.0;
  LapSolution lap;                      // on the padded square problem
};

/// Smallest square grid holding n points.
std::pair<std::size_t, std::size_t> defaultGridShape(std::size_t n);

/// Cell centres spanning the bounding box of `points`, corners included.
std::vector<Point2> gridCentres(const std::vector<Point2>& points, std::size_t rows, std::size_t cols);

GridMap gridMap(const std::vector<Point2>& points, std::size_t rows, std::size_t cols);
GridMap gridMap(const std::vector<Point2>& points);

/// (1 - t) * embedded + t * grid, per coordinate.
std::vector<Point2> interpolateGridMap(const std::vector<Point2>& points, const GridMap& map, double t);

BoundaryRaster boundaryOnGrid(const GridMap& map, const std::vector<int>& labels,
                              const BoundaryConfig& config = {});

}  // namespace fscope
