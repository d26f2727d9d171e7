#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "featurescope/model.hpp"
#include "featurescope/random.hpp"

namespace fscope::testing {

inline NdTensor randomTensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  NdTensor t(shape);
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

inline double relativeError(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Direct six-nested-loop cross-correlation.
inline NdTensor naiveConv(const NdTensor& in, const NdTensor& w, const NdTensor& b, bool same) {
  const long H = static_cast<long>(in.dim(0)), W = static_cast<long>(in.dim(1));
  const long C = static_cast<long>(in.dim(2)), K = static_cast<long>(w.dim(3));
  const long off = same ? 1 : 0;
  const long Ho = same ? H : H - 2, Wo = same ? W : W - 2;
  NdTensor out({static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo), static_cast<std::size_t>(K)});
  for (long y = 0; y < Ho; ++y)
    for (long x = 0; x < Wo; ++x)
      for (long k = 0; k < K; ++k) {
        double s = b[k];
        for (long ky = 0; ky < 3; ++ky)
          for (long kx = 0; kx < 3; ++kx)
            for (long c = 0; c < C; ++c) {
              const long iy = y + ky - off, ix = x + kx - off;
              if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
              s += in.at(iy, ix, c) * w[((ky * 3 + kx) * C + c) * K + k];
            }
        out.at(y, x, k) = s;
      }
  return out;
}

/// Evaluation-mode forward starting at op `start` with `input` as that op's
/// input; returns the op outputs up to and including `stop`. Independent of
/// the engine's own forward loop, for finite-difference oracles.
inline NdTensor evalFrom(const Model& model, NdTensor current, std::size_t start, std::size_t stop) {
  for (std::size_t i = start; i <= stop; ++i) {
    const auto& layer = model.spec.layers[i];
    const auto& p = model.params.perLayer[i];
    switch (layer.kind) {
      case LayerKind::Conv3x3:
        current = naiveConv(current, p.weights, p.bias, layer.padding == Padding::Same);
        break;
      case LayerKind::MaxPool2x2: {
        const std::size_t H = current.dim(0), W = current.dim(1), C = current.dim(2);
        NdTensor out({(H + 1) / 2, (W + 1) / 2, C});
        for (std::size_t y = 0; y < out.dim(0); ++y)
          for (std::size_t x = 0; x < out.dim(1); ++x)
            for (std::size_t c = 0; c < C; ++c) {
              double m = -INFINITY;
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx)
                  if (2 * y + dy < H && 2 * x + dx < W) m = std::max(m, current.at(2 * y + dy, 2 * x + dx, c));
              out.at(y, x, c) = m;
            }
        current = std::move(out);
        break;
      }
      case LayerKind::Dense: {
        const std::size_t In = p.weights.dim(0), Out = p.weights.dim(1);
        NdTensor out({Out});
        for (std::size_t o = 0; o < Out; ++o) {
          double s = p.bias[o];
          for (std::size_t k = 0; k < In; ++k) s += current[k] * p.weights[k * Out + o];
          out[o] = s;
        }
        current = std::move(out);
        break;
      }
      case LayerKind::ReLU:
        for (double& v : current.values()) v = std::max(v, 0.0);
        break;
      case LayerKind::Softmax: {
        double m = -INFINITY, z = 0.0;
        for (double v : current.values()) m = std::max(m, v);
        for (double& v : current.values()) z += (v = std::exp(v - m));
        for (double& v : current.values()) v /= z;
        break;
      }
      case LayerKind::Flatten:
        current = current.reshaped({current.size()});
        break;
      case LayerKind::Dropout:
        break;
    }
  }
  return current;
}

inline double crossEntropyFrom(const Model& model, const NdTensor& input, std::size_t start,
                               std::size_t label) {
  const auto logits = evalFrom(model, input, start, model.spec.logitsOp());
  double m = -INFINITY, z = 0.0;
  for (double v : logits.values()) m = std::max(m, v);
  for (double v : logits.values()) z += std::exp(v - m);
  return -(logits[label] - m - std::log(z));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() /
            ("fscope_" + tag + "_" + std::to_string(rng() % 1000000000ULL));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fscope::testing
