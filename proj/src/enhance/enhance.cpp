#include "featurescope/enhance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "featurescope/parallel.hpp"

namespace fscope {

std::vector<PointDecor> decoratePoints(const Embedding2D& embedding, const LabeledImageSet& set,
                                       const std::vector<std::size_t>& indices,
                                       const std::vector<Prediction>& predictions,
                                       const DecorConfig& config) {
  const std::size_t n = embedding.pointIds.size();
  if (indices.size() != n || predictions.size() != n) {
    throw Error("decorations need one image and prediction per embedded point");
  }
  if (!(config.radiusMax >= config.radiusMin)) throw Error("radiusMax must be at least radiusMin");
  std::vector<PointDecor> out(n);
  const double span = config.radiusMax - config.radiusMin;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& image = set.images.at(indices[k]);
    if (image.id != embedding.pointIds[k]) {
      throw Error("embedded point " + std::to_string(k) + " is '" + embedding.pointIds[k] +
                  "' but the image is '" + image.id + "'");
    }
    PointDecor d;
    d.predictedClass = predictions[k].predicted;
    d.trueClass = static_cast<std::size_t>(image.label);
    d.misclassified = d.predictedClass != d.trueClass;
    d.certainty = std::max(predictions[k].probabilities[0], predictions[k].probabilities[1]);
    // Certainty runs over [0.5, 1] for two classes.
    const double s = std::clamp((d.certainty - 0.5) / 0.5, 0.0, 1.0);
    d.radiusCertainty = std::clamp(config.radiusMin + span * s, config.radiusMin, config.radiusMax);
    d.radiusUncertainty = std::clamp(config.radiusMin + span * (1.0 - s), config.radiusMin, config.radiusMax);
    out[k] = d;
  }
  return out;
}

Point2 BoundaryRaster::cellCentre(std::size_t row, std::size_t col) const {
  return {xmin + (static_cast<double>(col) + 0.5) * (xmax - xmin) / static_cast<double>(gx),
          ymin + (static_cast<double>(row) + 0.5) * (ymax - ymin) / static_cast<double>(gy)};
}

namespace {

std::vector<double> gaussianBlur(const std::vector<double>& field, std::size_t gx, std::size_t gy,
                                 double sigma) {
  if (sigma <= 0.0) return field;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  std::vector<double> tmp(field.size()), out(field.size());
  for (std::size_t y = 0; y < gy; ++y)
    for (std::size_t x = 0; x < gx; ++x) {
      double acc = 0, mass = 0;
      for (int d = -r; d <= r; ++d) {
        const long xx = static_cast<long>(x) + d;
        if (xx < 0 || xx >= static_cast<long>(gx)) continue;
        acc += k[d + r] * field[y * gx + xx];
        mass += k[d + r];
      }
      tmp[y * gx + x] = acc / mass;
    }
  for (std::size_t y = 0; y < gy; ++y)
    for (std::size_t x = 0; x < gx; ++x) {
      double acc = 0, mass = 0;
      for (int d = -r; d <= r; ++d) {
        const long yy = static_cast<long>(y) + d;
        if (yy < 0 || yy >= static_cast<long>(gy)) continue;
        acc += k[d + r] * tmp[yy * gx + x];
        mass += k[d + r];
      }
      out[y * gx + x] = acc / mass;
    }
  return out;
}

}  // namespace

BoundaryRaster estimateBoundary(const std::vector<Point2>& points, const std::vector<int>& labels,
                                const BoundaryConfig& config) {
  const std::size_t n = points.size();
  if (labels.size() != n) throw Error("boundary needs one label per point");
  if (config.k == 0 || config.k % 2 == 0) throw Error("boundary k must be odd");
  if (config.k > n) {
    throw Error("boundary k = " + std::to_string(config.k) + " exceeds the " + std::to_string(n) + " points");
  }
  if (config.gx < 32 || config.gy < 32) throw Error("boundary resolution must be at least 32x32");
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error("boundary labels must be 0 or 1");
  }
  BoundaryRaster out;
  out.gx = config.gx;
  out.gy = config.gy;
  out.xmin = out.ymin = std::numeric_limits<double>::infinity();
  out.xmax = out.ymax = -std::numeric_limits<double>::infinity();
  for (const auto& p : points) {
    out.xmin = std::min(out.xmin, p[0]);
    out.xmax = std::max(out.xmax, p[0]);
    out.ymin = std::min(out.ymin, p[1]);
    out.ymax = std::max(out.ymax, p[1]);
  }
  const std::size_t cells = config.gx * config.gy;
  out.labels.assign(cells, 0);
  std::vector<Point2> centres(cells);
  parallelFor(config.gy, [&](std::size_t row) {
    std::vector<std::pair<double, std::size_t>> dist(n);
    for (std::size_t col = 0; col < config.gx; ++col) {
      const auto c = out.cellCentre(row, col);
      centres[row * config.gx + col] = c;
      for (std::size_t i = 0; i < n; ++i) {
        const double dx = points[i][0] - c[0], dy = points[i][1] - c[1];
        dist[i] = {dx * dx + dy * dy, i};
      }
      std::partial_sort(dist.begin(), dist.begin() + config.k, dist.end());
      int votes[2] = {0, 0};
      for (std::size_t j = 0; j < config.k; ++j) ++votes[labels[dist[j].second]];
      out.labels[row * config.gx + col] =
          votes[0] == votes[1] ? labels[dist[0].second] : (votes[1] > votes[0] ? 1 : 0);
    }
  });
  std::vector<double> field(cells);
  for (std::size_t i = 0; i < cells; ++i) field[i] = out.labels[i] ? 1.0 : -1.0;
  out.smoothed = gaussianBlur(field, config.gx, config.gy, config.smoothSigma);
  out.contour = marchingSquares(out.smoothed, config.gx, config.gy, centres);
  return out;
}

std::vector<Polyline> marchingSquares(const std::vector<double>& field, std::size_t gx,
                                      std::size_t gy, const std::vector<Point2>& centres) {
  // Edge ids: 2*(r*gx + c) for the edge to the right of node (r, c),
  // 2*(r*gx + c) + 1 for the edge below it.
  auto inside = [&](std::size_t r, std::size_t c) { return field[r * gx + c] >= 0.0; };
  auto crossing = [&](std::size_t edge) -> Point2 {
    const std::size_t node = edge / 2;
    const std::size_t r = node / gx, c = node % gx;
    const std::size_t other = edge % 2 ? (r + 1) * gx + c : r * gx + c + 1;
    const double f0 = field[node], f1 = field[other];
    const double t = f0 == f1 ? 0.5 : f0 / (f0 - f1);
    const auto& a = centres[node];
    const auto& b = centres[other];
    return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])};
  };
  std::vector<std::pair<std::size_t, std::size_t>> segments;
  for (std::size_t r = 0; r + 1 < gy; ++r) {
    for (std::size_t c = 0; c + 1 < gx; ++c) {
      const int code = (inside(r, c) ? 1 : 0) | (inside(r, c + 1) ? 2 : 0) |
                       (inside(r + 1, c + 1) ? 4 : 0) | (inside(r + 1, c) ? 8 : 0);
      if (code == 0 || code == 15) continue;
      const std::size_t top = 2 * (r * gx + c), left = top + 1;
      const std::size_t bottom = 2 * ((r + 1) * gx + c), right = 2 * (r * gx + c + 1) + 1;
      const double centre = 0.25 * (field[r * gx + c] + field[r * gx + c + 1] +
                                    field[(r + 1) * gx + c] + field[(r + 1) * gx + c + 1]);
      switch (code) {
        case 1: case 14: segments.push_back({left, top}); break;
        case 2: case 13: segments.push_back({top, right}); break;
        case 3: case 12: segments.push_back({left, right}); break;
        case 4: case 11: segments.push_back({right, bottom}); break;
        case 6: case 9: segments.push_back({top, bottom}); break;
        case 7: case 8: segments.push_back({left, bottom}); break;
        case 5:
          if (centre >= 0.0) {
            segments.push_back({left, bottom});
            segments.push_back({top, right});
          } else {
            segments.push_back({left, top});
            segments.push_back({right, bottom});
          }
          break;
        case 10:
          if (centre >= 0.0) {
            segments.push_back({left, top});
            segments.push_back({right, bottom});
          } else {
            segments.push_back({left, bottom});
            segments.push_back({top, right});
          }
          break;
      }
    }
  }
  // Link segments sharing an edge crossing into polylines.
  std::map<std::size_t, std::vector<std::size_t>> byEdge;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    byEdge[segments[s].first].push_back(s);
    byEdge[segments[s].second].push_back(s);
  }
  std::vector<bool> used(segments.size(), false);
  std::vector<Polyline> lines;
  auto walk = [&](std::size_t startSeg, std::size_t startEdge) {
    std::vector<std::size_t> edges{startEdge};
    std::size_t seg = startSeg, edge = startEdge;
    while (true) {
      used[seg] = true;
      edge = segments[seg].first == edge ? segments[seg].second : segments[seg].first;
      edges.push_back(edge);
      std::size_t next = segments.size();
      for (auto s : byEdge[edge]) {
        if (!used[s]) next = s;
      }
      if (next == segments.size()) break;
      seg = next;
    }
    Polyline line;
    for (auto e : edges) line.push_back(crossing(e));
    lines.push_back(std::move(line));
  };
  // Open chains start at edges touched once; the remainder are loops.
  for (const auto& [edge, segs] : byEdge) {
    if (segs.size() == 1 && !used[segs[0]]) walk(segs[0], edge);
  }
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (!used[s]) walk(s, segments[s].first);
  }
  return lines;
}

std::pair<std::size_t, std::size_t> defaultGridShape(std::size_t n) {
  std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  while (side * side < n) ++side;
  while (side > 1 && (side - 1) * (side - 1) >= n) --side;
  return {side, side};
}

std::vector<Point2> gridCentres(const std::vector<Point2>& points, std::size_t rows, std::size_t cols) {
  double xmin = std::numeric_limits<double>::infinity(), ymin = xmin;
  double xmax = -xmin, ymax = -xmin;
  for (const auto& p : points) {
    xmin = std::min(xmin, p[0]);
    xmax = std::max(xmax, p[0]);
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  auto axis = [](double lo, double hi, std::size_t count, std::size_t i) {
    if (count == 1) return 0.5 * (lo + hi);
    return lo + static_cast<double>(i) * (hi - lo) / static_cast<double>(count - 1);
  };
  std::vector<Point2> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = {axis(xmin, xmax, cols, c), axis(ymin, ymax, rows, r)};
  return out;
}

GridMap gridMap(const std::vector<Point2>& points, std::size_t rows, std::size_t cols) {
  const std::size_t n = points.size();
  const std::size_t cells = rows * cols;
  if (n == 0) throw Error("grid mapping needs at least one point");
  if (cells < n) {
    throw Error("grid " + std::to_string(rows) + "x" + std::to_string(cols) + " has fewer cells than the " +
                std::to_string(n) + " points");
  }
  const auto centres = gridCentres(points, rows, cols);
  // Rows beyond n are zero-cost virtual points.
  Matrix cost = Matrix::Zero(static_cast<Eigen::Index>(cells), static_cast<Eigen::Index>(cells));
  parallelFor(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < cells; ++j) {
      const double dx = points[i][0] - centres[j][0], dy = points[i][1] - centres[j][1];
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = dx * dx + dy * dy;
    }
  });
  GridMap map;
  map.rows = rows;
  map.cols = cols;
  map.lap = solveLap(cost);
  map.assignment.resize(n);
  map.gridCoords.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    map.assignment[i] = map.lap.rowToCol[i];
    map.gridCoords[i] = centres[map.assignment[i]];
    map.cost += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(map.assignment[i]));
  }
  return map;
}

GridMap gridMap(const std::vector<Point2>& points) {
  const auto [rows, cols] = defaultGridShape(points.size());
  return gridMap(points, rows, cols);
}

std::vector<Point2> interpolateGridMap(const std::vector<Point2>& points, const GridMap& map, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("grid fraction must be in [0, 1]");
  if (map.gridCoords.size() != points.size()) throw Error("grid map does not match the point count");
  std::vector<Point2> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int d = 0; d < 2; ++d) out[i][d] = (1.0 - t) * points[i][d] + t * map.gridCoords[i][d];
  }
  return out;
}

BoundaryRaster boundaryOnGrid(const GridMap& map, const std::vector<int>& labels,
                              const BoundaryConfig& config) {
  return estimateBoundary(map.gridCoords, labels, config);
}

}  // namespace fscope
