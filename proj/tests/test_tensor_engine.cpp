#include <gtest/gtest.h>

#include <numeric>

#include "featurescope/architecture.hpp"
#include "featurescope/layers.hpp"
#include "featurescope/model.hpp"
#include "support.hpp"

using namespace fscope;
using fscope::testing::naiveConv;
using fscope::testing::randomTensor;
using fscope::testing::relativeError;

TEST(NdTensor, SizeMustMatchShape) {
  EXPECT_THROW(NdTensor({2, 3}, std::vector<double>(5)), ShapeError);
  NdTensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(shapeProduct(t.shape()), t.size());
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  NdTensor in({5, 5, 1}, 1.0);
  auto out = ops::conv2dForward(in, NdTensor({3, 3, 1, 1}), NdTensor({1}), Padding::Same);
  EXPECT_EQ(out, NdTensor({5, 5, 1}));
}

TEST(Conv2d, CentreKernelIsIdentity) {
  Rng rng(1);
  auto in = randomTensor({5, 5, 1}, rng);
  NdTensor w({3, 3, 1, 1});
  w[4] = 1.0;
  EXPECT_EQ(ops::conv2dForward(in, w, NdTensor({1}), Padding::Same), in);
}

TEST(Conv2d, MatchesNaiveLoopOnSmallCase) {
  Rng rng(2);
  auto in = randomTensor({4, 4, 2}, rng);
  auto w = randomTensor({3, 3, 2, 3}, rng);
  auto b = randomTensor({3}, rng);
  for (bool same : {true, false}) {
    auto got = ops::conv2dForward(in, w, b, same ? Padding::Same : Padding::Valid);
    auto want = naiveConv(in, w, b, same);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, MatchesNaiveLoopOnRandomShapes) {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t H = 3 + uniformIndex(rng, 14), W = 3 + uniformIndex(rng, 14);
    const std::size_t C = 1 + uniformIndex(rng, 4), K = 1 + uniformIndex(rng, 4);
    auto in = randomTensor({H, W, C}, rng);
    auto w = randomTensor({3, 3, C, K}, rng);
    auto b = randomTensor({K}, rng);
    const bool same = trial % 2 == 0;
    auto got = ops::conv2dForward(in, w, b, same ? Padding::Same : Padding::Valid);
    auto want = naiveConv(in, w, b, same);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_EQ(got.shape(), ops::conv2dOutputShape(in.shape(), K, same ? Padding::Same : Padding::Valid));
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, ShapeMismatchIsDescriptive) {
  NdTensor in({5, 5, 2});
  try {
    ops::conv2dForward(in, NdTensor({3, 3, 3, 1}), NdTensor({1}), Padding::Same);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("5x5x2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ops::conv2dForward(NdTensor({2, 2, 1}), NdTensor({3, 3, 1, 1}), NdTensor({1}), Padding::Valid),
               ShapeError);
}

TEST(MaxPool, SmallExamples) {
  NdTensor in({2, 2, 1}, {1, 2, 3, 4});
  auto r = ops::maxPool2x2Forward(in);
  EXPECT_EQ(r.output.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(r.output[0], 4.0);
  EXPECT_EQ(r.argmax[0], 3u);

  NdTensor c({5, 3, 2}, 0.7);
  auto rc = ops::maxPool2x2Forward(c);
  EXPECT_EQ(rc.output, NdTensor({3, 2, 2}, 0.7));
  // Ties go to the first element in scan order.
  EXPECT_EQ(rc.argmax[0], 0u);
}

TEST(MaxPool, MatchesBruteForce) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t H = 1 + uniformIndex(rng, 9), W = 1 + uniformIndex(rng, 9), C = 1 + uniformIndex(rng, 3);
    auto in = trial == 0 ? randomTensor({6, 6, 3}, rng) : randomTensor({H, W, C}, rng);
    auto r = ops::maxPool2x2Forward(in);
    const std::size_t h = in.dim(0), w = in.dim(1);
    ASSERT_EQ(r.output.shape(), (Shape{(h + 1) / 2, (w + 1) / 2, in.dim(2)}));
    for (std::size_t y = 0; y < r.output.dim(0); ++y)
      for (std::size_t x = 0; x < r.output.dim(1); ++x)
        for (std::size_t c = 0; c < in.dim(2); ++c) {
          double m = -INFINITY;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
              if (2 * y + dy < h && 2 * x + dx < w) m = std::max(m, in.at(2 * y + dy, 2 * x + dx, c));
          EXPECT_EQ(r.output.at(y, x, c), m);
        }
  }
}

TEST(MaxPool, CeilChainFromInputSize) {
  Shape s{78, 78, 2};
  std::vector<std::size_t> extents;
  for (int i = 0; i < 4; ++i) {
    s = ops::maxPool2x2OutputShape(s);
    extents.push_back(s[0]);
  }
  EXPECT_EQ(extents, (std::vector<std::size_t>{39, 20, 10, 5}));
}

TEST(MaxPool, BackwardRoutesOnlyToArgmax) {
  Rng rng(5);
  auto in = randomTensor({7, 5, 3}, rng);
  auto r = ops::maxPool2x2Forward(in);
  auto g = randomTensor(r.output.shape(), rng);
  auto back = ops::maxPool2x2Backward(g, r.argmax, in.shape());
  EXPECT_NEAR(back.sum(), g.sum(), 1e-12);
  std::size_t nonzero = 0;
  for (double v : back.values()) nonzero += v != 0.0;
  EXPECT_EQ(nonzero, g.size());
  for (std::size_t k = 0; k < r.argmax.size(); ++k) EXPECT_EQ(back[r.argmax[k]], g[k]);
}

TEST(Elementwise, SoftmaxReluDense) {
  auto p = ops::softmaxForward(NdTensor::vector({0, 0}));
  EXPECT_EQ(p, NdTensor::vector({0.5, 0.5}));
  EXPECT_EQ(ops::reluForward(NdTensor::vector({-1, 2})), NdTensor::vector({0, 2}));
  NdTensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  auto x = NdTensor::vector({0.3, -2, 7});
  EXPECT_EQ(ops::denseForward(x, eye, NdTensor({3})), x);
}

TEST(Elementwise, SoftmaxSumsToOneForExtremeLogits) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + uniformIndex(rng, 6);
    auto logits = randomTensor({n}, rng, -800, 800);
    auto p = ops::softmaxForward(logits);
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    for (double v : p.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_TRUE(p.allFinite());
  }
}

TEST(DenseBackward, QuadraticLossClosedForm) {
  Rng rng(7);
  auto x = randomTensor({4}, rng);
  auto W = randomTensor({4, 3}, rng);
  auto b = randomTensor({3}, rng);
  auto t = randomTensor({3}, rng);
  // L = 0.5 |y - t|^2, dL/dy = y - t, dL/dW = x^T (y - t), dL/dx = W (y - t).
  auto y = ops::denseForward(x, W, b);
  NdTensor r({3});
  for (int o = 0; o < 3; ++o) r[o] = y[o] - t[o];
  auto g = ops::denseBackward(x, W, r, true);
  for (int i = 0; i < 4; ++i) {
    double dx = 0.0;
    for (int o = 0; o < 3; ++o) {
      EXPECT_NEAR(g.weights[i * 3 + o], x[i] * r[o], 1e-14);
      dx += W[i * 3 + o] * r[o];
    }
    EXPECT_NEAR(g.input[i], dx, 1e-14);
  }
  for (int o = 0; o < 3; ++o) EXPECT_NEAR(g.bias[o], r[o], 1e-14);
}

TEST(Conv2dBackward, MatchesFiniteDifferences) {
  Rng rng(8);
  for (bool same : {true, false}) {
    const Padding pad = same ? Padding::Same : Padding::Valid;
    auto in = randomTensor({6, 5, 3}, rng);
    auto w = randomTensor({3, 3, 3, 4}, rng);
    auto b = randomTensor({4}, rng);
    auto probe = randomTensor(ops::conv2dOutputShape(in.shape(), 4, pad), rng);
    auto loss = [&](const NdTensor& i, const NdTensor& k, const NdTensor& bb) {
      auto o = ops::conv2dForward(i, k, bb, pad);
      double s = 0.0;
      for (std::size_t q = 0; q < o.size(); ++q) s += o[q] * probe[q];
      return s;
    };
    auto g = ops::conv2dBackward(in, w, probe, pad, true);
    const double h = 1e-5;
    for (std::size_t k = 0; k < w.size(); ++k) {
      auto wp = w, wm = w;
      wp[k] += h;
      wm[k] -= h;
      EXPECT_LT(relativeError(g.weights[k], (loss(in, wp, b) - loss(in, wm, b)) / (2 * h)), 1e-6);
    }
    for (std::size_t k = 0; k < in.size(); ++k) {
      auto ip = in, im = in;
      ip[k] += h;
      im[k] -= h;
      EXPECT_LT(relativeError(g.input[k], (loss(ip, w, b) - loss(im, w, b)) / (2 * h)), 1e-6);
    }
    for (std::size_t k = 0; k < b.size(); ++k) {
      auto bp = b, bm = b;
      bp[k] += h;
      bm[k] -= h;
      EXPECT_LT(relativeError(g.bias[k], (loss(in, w, bp) - loss(in, w, bm)) / (2 * h)), 1e-6);
    }
  }
}

namespace {

Model smallModel(std::uint64_t seed) {
  ArchitectureConfig cfg;
  cfg.inputShape = {12, 12, 2};
  cfg.blocks = {{1, 4}, {2, 6}};
  cfg.denseSizes = {8};
  return buildModel(cfg, seed);
}

}  // namespace

TEST(Forward, ZeroImageDependsOnlyOnBiases) {
  auto model = smallModel(9);
  const NdTensor zero(model.spec.inputShape);
  // Zero biases: every activation is zero, so the classes tie.
  EXPECT_EQ(forward(model, zero).probabilities, NdTensor::vector({0.5, 0.5}));

  Rng rng(10);
  for (auto& p : model.params.perLayer)
    for (double& v : p.bias.values()) v = uniform(rng, -0.5, 0.5);
  auto trace = forwardToLayer(model, zero, 1);
  const auto& act = trace.featureActivation(model.spec, 1);
  const auto& b = model.params.perLayer[0].bias;
  for (std::size_t k = 0; k < act.size(); ++k) EXPECT_EQ(act[k], std::max(0.0, b[k % b.size()]));
  EXPECT_NEAR(forward(model, zero).probabilities.sum(), 1.0, 1e-12);
}

TEST(Forward, DefaultModelEndsWithTwoProbabilities) {
  auto model = buildDefaultModel(11);
  Rng rng(12);
  auto image = randomTensor({78, 78, 2}, rng, 0, 1);
  ForwardOptions opts;
  opts.captureAll = true;
  auto trace = forward(model, image, opts);
  EXPECT_EQ(trace.probabilities.shape(), (Shape{2}));
  EXPECT_NEAR(trace.probabilities.sum(), 1.0, 1e-6);
  const auto layers = model.spec.featureLayers();
  ASSERT_EQ(layers.size(), 14u);
  EXPECT_EQ(layers[0].shape, (Shape{78, 78, 2}));
  EXPECT_EQ(layers[1].shape, (Shape{78, 78, 32}));
  EXPECT_EQ(layers[4].shape, (Shape{39, 39, 64}));
  EXPECT_EQ(layers[10].shape, (Shape{10, 10, 256}));
  EXPECT_EQ(layers[11].shape, (Shape{256}));
  EXPECT_EQ(layers[13].shape, (Shape{2}));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    EXPECT_EQ(trace.featureActivation(model.spec, l).shape(), layers[l].shape);
  }
}

TEST(Forward, WrongInputShapeIsRejected) {
  auto model = smallModel(13);
  EXPECT_THROW(forward(model, NdTensor({12, 12, 3})), ShapeError);
}

TEST(Forward, BadLayerChainNamesFirstFailingLayer) {
  ModelSpec spec;
  spec.inputShape = {8, 8, 2};
  spec.layers = {LayerSpec::conv(2, 4), LayerSpec::conv(3, 4)};
  try {
    spec.propagateShapes();
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1 (Conv3x3)"), std::string::npos) << e.what();
  }
}

TEST(Backward, ZeroLossGradientGivesZeroParameterGradients) {
  auto model = smallModel(14);
  Rng rng(15);
  ForwardOptions opts;
  opts.captureAll = true;
  auto trace = forward(model, randomTensor(model.spec.inputShape, rng, 0, 1), opts);
  auto g = backwardToParams(model, trace, NdTensor({2}));
  for (const auto& p : g.perLayer) {
    for (double v : p.weights.values()) EXPECT_EQ(v, 0.0);
    for (double v : p.bias.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, MissingBookkeepingIsAnError) {
  auto model = smallModel(16);
  Rng rng(17);
  auto trace = forward(model, randomTensor(model.spec.inputShape, rng, 0, 1));
  EXPECT_THROW(backwardToParams(model, trace, NdTensor({2})), Error);
  ForwardOptions opts;
  opts.captureAll = true;
  auto full = forward(model, randomTensor(model.spec.inputShape, rng, 0, 1), opts);
  full.poolArgmax[2].clear();
  EXPECT_THROW(backwardToParams(model, full, NdTensor::vector({1, -1})), Error);
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
  auto model = smallModel(18);
  Rng rng(19);
  auto image = randomTensor(model.spec.inputShape, rng, 0, 1);
  const std::size_t label = 1;
  ForwardOptions opts;
  opts.captureAll = true;
  auto trace = forward(model, image, opts);
  auto dl = trace.probabilities;
  dl[label] -= 1.0;
  auto grads = backwardToParams(model, trace, dl);
  const double h = 1e-5;
  std::size_t checked = 0;
  for (std::size_t l = 0; l < model.spec.layers.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      auto& tensor = which ? model.params.perLayer[l].bias : model.params.perLayer[l].weights;
      const auto& g = which ? grads.perLayer[l].bias : grads.perLayer[l].weights;
      for (std::size_t s = 0; s < std::min<std::size_t>(tensor.size(), 10); ++s) {
        const std::size_t k = uniformIndex(rng, tensor.size());
        const double orig = tensor[k];
        tensor[k] = orig + h;
        const double lp = fscope::testing::crossEntropyFrom(model, image, 0, label);
        tensor[k] = orig - h;
        const double lm = fscope::testing::crossEntropyFrom(model, image, 0, label);
        tensor[k] = orig;
        EXPECT_LT(relativeError(g[k], (lp - lm) / (2 * h)), 1e-4) << "layer " << l << " index " << k;
        ++checked;
      }
    }
  }
  EXPECT_GE(checked, 60u);
}

TEST(BackwardToInput, LinearModelGivesWeightRow) {
  Model model;
  model.spec.inputShape = {2, 2, 1};
  model.spec.layers = {LayerSpec::of(LayerKind::Flatten), LayerSpec::dense(4, 2),
                       LayerSpec::of(LayerKind::Softmax)};
  Rng rng(20);
  model.params.perLayer = {{}, {randomTensor({4, 2}, rng), randomTensor({2}, rng)}, {}};
  ForwardOptions opts;
  opts.captureAll = true;
  auto trace = forward(model, randomTensor({2, 2, 1}, rng), opts);
  const std::size_t logitsLayer = model.spec.featureLayers().size() - 1;
  auto g = backwardToInput(model, trace, logitsLayer, NdTensor::vector({0, 1}));
  ASSERT_EQ(g.shape(), (Shape{2, 2, 1}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(g[i], model.params.perLayer[1].weights[i * 2 + 1]);
}

TEST(BackwardToInput, ChannelSumMatchesFiniteDifferences) {
  auto model = smallModel(21);
  Rng rng(22);
  auto image = randomTensor(model.spec.inputShape, rng, 0, 1);
  const std::size_t layer = 1, channel = 2;
  auto trace = forwardToLayer(model, image, layer);
  const auto& act = trace.featureActivation(model.spec, layer);
  NdTensor seed(act.shape());
  for (std::size_t k = channel; k < seed.size(); k += act.dim(2)) seed[k] = 1.0;
  auto g = backwardToInput(model, trace, layer, seed);
  auto objective = [&](const NdTensor& img) {
    auto a = fscope::testing::evalFrom(model, img, 0, *model.spec.featureLayers()[layer].op);
    double s = 0.0;
    for (std::size_t k = channel; k < a.size(); k += a.dim(2)) s += a[k];
    return s;
  };
  const double h = 1e-5;
  for (std::size_t k = 0; k < image.size(); ++k) {
    auto p = image, m = image;
    p[k] += h;
    m[k] -= h;
    EXPECT_LT(relativeError(g[k], (objective(p) - objective(m)) / (2 * h)), 1e-4);
  }
  EXPECT_THROW(backwardToInput(model, trace, 99, seed), Error);
}

TEST(BackwardToInput, DeadReluRegionHasZeroGradient) {
  Model model;
  model.spec.inputShape = {4, 4, 1};
  model.spec.layers = {LayerSpec::conv(1, 1), LayerSpec::of(LayerKind::ReLU)};
  NdTensor w({3, 3, 1, 1});
  w[4] = 1.0;
  model.params.perLayer = {{w, NdTensor({1})}, {}};
  NdTensor image({4, 4, 1}, 1.0);
  for (std::size_t k = 0; k < 8; ++k) image[k] = -1.0;  // top half is negative
  auto trace = forwardToLayer(model, image, 1);
  auto g = backwardToInput(model, trace, 1, NdTensor({4, 4, 1}, 1.0));
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(g[k], 0.0);
  for (std::size_t k = 8; k < 16; ++k) EXPECT_EQ(g[k], 1.0);
}

TEST(Dropout, InvertedScalingOnlyInTraining) {
  Model model;
  model.spec.inputShape = {4, 4, 1};
  model.spec.layers = {LayerSpec::dropout(0.25), LayerSpec::of(LayerKind::Flatten),
                       LayerSpec::dense(16, 2), LayerSpec::of(LayerKind::Softmax)};
  model.params.perLayer = {{}, {}, {NdTensor({16, 2}), NdTensor({2})}, {}};
  NdTensor image({4, 4, 1}, 1.0);
  ForwardOptions opts;
  opts.captureAll = true;
  EXPECT_EQ(forward(model, image, opts).opOutputs[0], image);
  Rng rng(23);
  opts.training = true;
  opts.rng = &rng;
  auto t = forward(model, image, opts);
  for (double v : t.opOutputs[0].values()) EXPECT_TRUE(v == 0.0 || std::abs(v - 4.0 / 3.0) < 1e-15);
}
