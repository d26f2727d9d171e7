#include <algorithm>
#include <cmath>
#include <vector>

#include "featurescope/dataset.hpp"

namespace fscope {

const char* rejectReasonName(RejectReason reason) {
  switch (reason) {
    case RejectReason::EmptyChannel: return "empty channel";
    case RejectReason::SaturatedBorder: return "saturated border";
    case RejectReason::CentroidDistance: return "centroid distance";
    case RejectReason::WeakChannel: return "weak channel";
  }
  return "unknown";
}

namespace {

std::vector<double> gaussianKernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  return k;
}

// Separable blur; the kernel is renormalized where it overhangs the border so
// a uniform channel stays uniform.
std::vector<double> blurChannel(const NdTensor& image, std::size_t channel, double sigma) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  const auto k = gaussianKernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(H * W), out(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0.0, mass = 0.0;
      for (int d = -r; d <= r; ++d) {
        const long xx = static_cast<long>(x) + d;
        if (xx < 0 || xx >= static_cast<long>(W)) continue;
        acc += k[d + r] * image.at(y, xx, channel);
        mass += k[d + r];
      }
      tmp[y * W + x] = acc / mass;
    }
  }
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0.0, mass = 0.0;
      for (int d = -r; d <= r; ++d) {
        const long yy = static_cast<long>(y) + d;
        if (yy < 0 || yy >= static_cast<long>(H)) continue;
        acc += k[d + r] * tmp[yy * W + x];
        mass += k[d + r];
      }
      out[y * W + x] = acc / mass;
    }
  }
  return out;
}

double channelMax(const NdTensor& image, std::size_t c) {
  double m = 0.0;
  const std::size_t C = image.dim(2);
  for (std::size_t i = c; i < image.size(); i += C) m = std::max(m, image[i]);
  return m;
}

bool borderSaturated(const NdTensor& image, std::size_t c, double level) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  for (std::size_t x = 0; x < W; ++x) {
    if (image.at(0, x, c) >= level || image.at(H - 1, x, c) >= level) return true;
  }
  for (std::size_t y = 0; y < H; ++y) {
    if (image.at(y, 0, c) >= level || image.at(y, W - 1, c) >= level) return true;
  }
  return false;
}

FilterOutcome reject(RejectReason reason, std::string detail) {
  FilterOutcome out;
  out.reason = reason;
  out.detail = std::move(detail);
  return out;
}

}  // namespace

std::array<double, 2> blurredCentroid(const NdTensor& image, std::size_t channel, double sigma) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  const auto blurred = blurChannel(image, channel, sigma);
  double total = 0.0, sy = 0.0, sx = 0.0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double v = blurred[y * W + x];
      total += v;
      sy += v * static_cast<double>(y);
      sx += v * static_cast<double>(x);
    }
  }
  if (total <= 0.0) return {0.5 * (H - 1.0), 0.5 * (W - 1.0)};
  return {sy / total, sx / total};
}

FilterOutcome filterImage(const NdTensor& raw, const FilterConfig& config) {
  if (raw.rank() != 3 || raw.dim(2) != 2) {
    throw ShapeError("filterImage expects H x W x 2, got " + shapeToString(raw.shape()));
  }
  for (double v : raw.values()) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error("raw image values must be finite and nonnegative");
  }
  const std::size_t C = 2;
  std::array<double, 2> maxima{};
  for (std::size_t c = 0; c < C; ++c) {
    maxima[c] = channelMax(raw, c);
    if (maxima[c] <= 0.0) {
      return reject(RejectReason::EmptyChannel, "channel " + std::to_string(c) + " is all zero");
    }
    if (borderSaturated(raw, c, config.saturationValue)) {
      return reject(RejectReason::SaturatedBorder,
                    "channel " + std::to_string(c) + " saturates on the border");
    }
  }

  NdTensor thresholded = raw;
  std::array<std::size_t, 2> nonzero{};
  for (std::size_t i = 0; i < thresholded.size(); ++i) {
    const std::size_t c = i % C;
    // Both forms of the comparison must pass so that the raw-domain bound and
    // idempotence hold exactly in floating point.
    const double v = thresholded[i];
    if (v < config.thresholdFraction * maxima[c] || v / maxima[c] < config.thresholdFraction) {
      thresholded[i] = 0.0;
    } else {
      ++nonzero[c];
    }
  }

  const auto a = blurredCentroid(thresholded, 0, config.centroidBlurSigma);
  const auto b = blurredCentroid(thresholded, 1, config.centroidBlurSigma);
  const double distance = std::hypot(a[0] - b[0], a[1] - b[1]);
  if (distance > config.maxCentroidDistance) {
    return reject(RejectReason::CentroidDistance,
                  "channel centres are " + std::to_string(distance) + " px apart");
  }
  for (std::size_t c = 0; c < C; ++c) {
    if (nonzero[c] < config.minNonzeroPixels) {
      return reject(RejectReason::WeakChannel, "channel " + std::to_string(c) + " keeps only " +
                                                   std::to_string(nonzero[c]) + " pixels");
    }
  }

  for (std::size_t i = 0; i < thresholded.size(); ++i) thresholded[i] /= maxima[i % C];
  FilterOutcome out;
  out.pixels = std::move(thresholded);
  return out;
}

}  // namespace fscope
