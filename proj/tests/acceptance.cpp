// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance <work-dir> [--fresh]
//
// The trained model lives in <work-dir>/bundle and is reused by later runs
// together with the recorded training time; --fresh retrains.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "featurescope/architecture.hpp"
#include "featurescope/bundle.hpp"
#include "featurescope/cli.hpp"
#include "featurescope/enhance.hpp"
#include "featurescope/featurevis.hpp"
#include "featurescope/interpret.hpp"
#include "support.hpp"

using namespace fscope;
using fscope::testing::randomTensor;
using fscope::testing::relativeError;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double secondsSince(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

int cli(const fs::path& bundle, std::vector<std::string> args, std::string* output = nullptr) {
  args.insert(args.begin(), {"--bundle", bundle.string()});
  std::ostringstream out, err;
  const int code = runCli(args, out, err);
  if (output) *output = out.str();
  if (code != kExitOk) std::cerr << args[2] << " failed: " << err.str() << "\n";
  return code;
}

// ---------------------------------------------------------------------------
// Gradient fidelity

// Loss plus the piecewise-linear pattern (ReLU signs, pool winners) of the pass.
struct Probe {
  double loss = 0.0;
  std::vector<std::uint32_t> pattern;
};

Probe probe(const Model& model, const NdTensor& image, std::size_t label) {
  ForwardOptions opts;
  opts.captureAll = true;
  const auto t = forward(model, image, opts);
  Probe p{-std::log(t.probabilities[label]), {}};
  for (std::size_t op = 0; op < model.spec.layers.size(); ++op) {
    if (model.spec.layers[op].kind == LayerKind::ReLU)
      for (double v : t.opOutputs[op].values()) p.pattern.push_back(v > 0.0);
    p.pattern.insert(p.pattern.end(), t.poolArgmax[op].begin(), t.poolArgmax[op].end());
  }
  return p;
}

// Central difference, or nothing when the stencil crosses a kink.
std::optional<double> smoothDifference(const Probe& base, const Probe& plus, const Probe& minus, double h) {
  if (plus.pattern != base.pattern || minus.pattern != base.pattern) return std::nullopt;
  return (plus.loss - minus.loss) / (2 * h);
}

Outcome gradientFidelity() {
  const auto t0 = Clock::now();
  auto model = buildDefaultModel(11);
  Rng rng(12);
  const auto image = randomTensor(model.spec.inputShape, rng, 0.0, 1.0);
  const std::size_t label = 1;
  ForwardOptions opts;
  opts.captureAll = true;
  const auto trace = forward(model, image, opts);
  auto dl = trace.probabilities;
  dl[label] -= 1.0;
  const auto grads = backwardToParams(model, trace, dl);
  const std::size_t logitsLayer = model.spec.featureLayers().size() - 1;
  const auto inputGrad = backwardToInput(model, trace, logitsLayer, dl);
  const auto base = probe(model, image, label);

  const double h = 1e-5;
  double worstParam = 0.0, worstInput = 0.0;
  std::size_t params = 0, inputs = 0, kinks = 0, nonzero = 0;
  std::vector<std::pair<std::size_t, int>> tensors;
  for (std::size_t l = 0; l < model.spec.layers.size(); ++l)
    for (int which = 0; which < 2; ++which)
      if ((which ? model.params.perLayer[l].bias : model.params.perLayer[l].weights).size() > 0)
        tensors.push_back({l, which});
  for (std::size_t draw = 0; params < 120; ++draw) {
    const auto [l, which] = tensors[draw % tensors.size()];
    auto& t = which ? model.params.perLayer[l].bias : model.params.perLayer[l].weights;
    const auto& g = which ? grads.perLayer[l].bias : grads.perLayer[l].weights;
    const std::size_t k = uniformIndex(rng, t.size());
    const double orig = t[k];
    t[k] = orig + h;
    const auto plus = probe(model, image, label);
    t[k] = orig - h;
    const auto minus = probe(model, image, label);
    t[k] = orig;
    const auto fd = smoothDifference(base, plus, minus, h);
    if (!fd) {
      ++kinks;
      continue;
    }
    worstParam = std::max(worstParam, relativeError(g[k], *fd));
    nonzero += g[k] != 0.0;
    ++params;
  }
  while (inputs < 120) {
    const std::size_t k = uniformIndex(rng, image.size());
    auto p = image, m = image;
    p[k] += h;
    m[k] -= h;
    const auto fd = smoothDifference(base, probe(model, p, label), probe(model, m, label), h);
    if (!fd) {
      ++kinks;
      continue;
    }
    worstInput = std::max(worstInput, relativeError(inputGrad[k], *fd));
    nonzero += inputGrad[k] != 0.0;
    ++inputs;
  }
  const double seconds = secondsSince(t0);
  return {worstParam <= 1e-4 && worstInput <= 1e-4 && seconds < 60.0,
          std::to_string(params) + " parameter and " + std::to_string(inputs) + " input coordinates (" +
              std::to_string(nonzero) + " nonzero, " + std::to_string(kinks) +
              " redrawn because the stencil crossed a ReLU or pooling switch), max rel err param " +
              fmt(worstParam, 3) + " input " + fmt(worstInput, 3) + ", " + fmt(seconds, 3) + " s"};
}

// ---------------------------------------------------------------------------
// Classification (shared trained model)

struct TrainedModel {
  fs::path bundle;
  bool cached = false;
  double trainSeconds = 0.0;
  bool ok = false;
};

TrainedModel prepareModel(const fs::path& work, bool fresh) {
  TrainedModel t;
  t.bundle = work / "bundle";
  const fs::path timing = work / "train_seconds.txt";
  if (!fresh && fs::exists(t.bundle / "manifest.json") && fs::exists(timing)) {
    const auto b = Bundle::open(t.bundle);
    if (b.has("model/checkpoint.fscp") && b.has("reports/confusion.json")) {
      std::ifstream(timing) >> t.trainSeconds;
      t.cached = t.ok = true;
      return t;
    }
  }
  fs::remove_all(t.bundle);
  fs::create_directories(work);
  if (cli(t.bundle, {"synth", "--seed", "0"}) != kExitOk) return t;
  const auto t0 = Clock::now();
  std::string log;
  if (cli(t.bundle, {"train", "--seed", "0"}, &log) != kExitOk) return t;
  t.trainSeconds = secondsSince(t0);
  std::cout << log;
  if (cli(t.bundle, {"eval"}) != kExitOk) return t;
  std::ofstream(timing) << std::setprecision(17) << t.trainSeconds << "\n";
  t.ok = true;
  return t;
}

Outcome classification(const TrainedModel& t) {
  if (!t.ok) return {false, "pipeline to a trained model failed"};
  const auto report = Bundle::open(t.bundle).readJson("reports/confusion.json");
  const double acc = report.at("overall").get<double>();
  std::size_t n = 0;
  for (const auto& row : report.at("counts"))
    for (const auto& c : row) n += c.get<std::size_t>();
  return {acc >= 0.90 && t.trainSeconds < 1800.0,
          "test accuracy " + fmt(acc) + " on " + std::to_string(n) + " images, training " +
              fmt(t.trainSeconds / 60.0, 3) + " min" + (t.cached ? " (recorded by an earlier run)" : "")};
}

// ---------------------------------------------------------------------------
// Image filter

Outcome filtering() {
  SynthConfig cfg;
  std::size_t accepted = 0, checked = 0, violations = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto raw = renderRawCell(s % 2 ? CellClass::Neutrophil : CellClass::Lymphocyte, cfg, 50000 + s);
    const auto out = filterImage(raw, cfg.filter);
    if (!out.accepted()) continue;
    ++accepted;
    const auto& px = *out.pixels;
    for (std::size_t c = 0; c < 2; ++c) {
      double rawMax = 0.0;
      for (std::size_t i = c; i < raw.size(); i += 2) rawMax = std::max(rawMax, raw[i]);
      for (std::size_t i = c; i < raw.size(); i += 2) {
        if (px[i] == 0.0) continue;
        ++checked;
        violations += raw[i] < 0.2 * rawMax;
      }
    }
    const auto again = filterImage(px, cfg.filter);
    violations += !again.accepted() || *again.pixels != px;
  }
  return {accepted >= 100 && violations == 0,
          std::to_string(accepted) + "/200 captures accepted, " + std::to_string(checked) +
              " surviving pixels checked, " + std::to_string(violations) + " violations"};
}

// ---------------------------------------------------------------------------
// t-SNE

double rowPerplexityOracle(const Matrix& D2, Eigen::Index i, double beta) {
  double z = 0.0, h = 0.0;
  std::vector<double> p;
  for (Eigen::Index j = 0; j < D2.cols(); ++j)
    if (j != i) z += p.emplace_back(std::exp(-beta * D2(i, j)));
  for (double v : p)
    if (v > 0) h -= v / z * std::log2(v / z);
  return std::pow(2.0, h);
}

Outcome tsne() {
  Rng rng(31);
  const std::size_t n = 300;
  Matrix X(n, 10);
  std::vector<int> comp(n);
  for (std::size_t i = 0; i < n; ++i) {
    comp[i] = static_cast<int>(i % 3);
    for (Eigen::Index d = 0; d < 10; ++d) X(i, d) = standardNormal(rng) + (d == comp[i] ? 8.0 : 0.0);
  }
  const Matrix D2 = pairwiseSquaredDistances(X);
  const auto aff = computeAffinities(D2, 30.0);
  double worstPerp = 0.0;
  for (Eigen::Index i = 0; i < D2.rows(); ++i) {
    worstPerp = std::max(worstPerp, std::abs(rowPerplexityOracle(D2, i, aff.beta[i]) - 30.0));
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("g" + std::to_string(i));
  TsneConfig cfg;
  cfg.seed = 5;
  const auto e = runTsne(aff.P, ids, cfg);
  std::size_t good = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      d.push_back({std::hypot(e.points[i][0] - e.points[j][0], e.points[i][1] - e.points[j][1]), j});
    }
    std::partial_sort(d.begin(), d.begin() + 10, d.end());
    std::size_t same = 0;
    for (std::size_t k = 0; k < 10; ++k) same += comp[d[k].second] == comp[i];
    good += same >= 6;
  }
  const double frac = static_cast<double>(good) / n;
  return {worstPerp <= 1e-4 && e.finalKl < e.klAfterExaggeration && frac >= 0.9,
          "max perplexity error " + fmt(worstPerp, 3) + ", KL after exaggeration " + fmt(e.klAfterExaggeration) +
              " final " + fmt(e.finalKl) + ", neighbourhood-preserving share " + fmt(frac)};
}

// ---------------------------------------------------------------------------
// Grid mapping

double exhaustiveOptimum(const Matrix& c) {
  std::vector<std::size_t> perm(static_cast<std::size_t>(c.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = INFINITY;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += c(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<Point2> randomPoints(std::size_t n, Rng& rng) {
  std::vector<Point2> pts(n);
  for (auto& p : pts) p = {uniform(rng, -5, 5), uniform(rng, -5, 5)};
  return pts;
}

Outcome gridMapping() {
  Rng rng(41);
  std::size_t mismatches = 0;
  const int trials = 400;
  for (int trial = 0; trial < trials; ++trial) {
    const auto n = static_cast<Eigen::Index>(1 + trial % 8);
    Matrix c(n, n);
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      c.data()[i] = trial % 2 ? uniform(rng, 0.0, 10.0) : static_cast<double>(uniformIndex(rng, 5));
    }
    mismatches += solveLap(c).cost - exhaustiveOptimum(c) != 0.0;
  }
  const auto pts = randomPoints(3600, rng);
  const auto t0 = Clock::now();
  const auto map = gridMap(pts);
  const double seconds = secondsSince(t0);
  const auto centres = gridCentres(pts, map.rows, map.cols);
  Matrix c(3600, 3600);
  for (std::size_t i = 0; i < 3600; ++i)
    for (std::size_t j = 0; j < 3600; ++j)
      c(i, j) = std::pow(pts[i][0] - centres[j][0], 2) + std::pow(pts[i][1] - centres[j][1], 2);
  const auto audit = auditLap(c, map.lap);
  const bool endpoints =
      interpolateGridMap(pts, map, 0.0) == pts && interpolateGridMap(pts, map, 1.0) == map.gridCoords;
  return {mismatches == 0 && audit.ok() && endpoints,
          std::to_string(mismatches) + "/" + std::to_string(trials) + " small instances off the optimum; N=3600 " +
              (audit.permutation ? "permutation" : "NOT a permutation") + ", min reduced cost " +
              fmt(audit.minReducedCost, 3) + ", slack " + fmt(audit.complementarySlack, 3) + " (" +
              fmt(seconds, 3) + " s); endpoints " + (endpoints ? "exact" : "inexact")};
}

// ---------------------------------------------------------------------------
// Decision boundary

int knnMajority(const std::vector<Point2>& pts, const std::vector<int>& labels, Point2 c) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    d.push_back({(pts[i][0] - c[0]) * (pts[i][0] - c[0]) + (pts[i][1] - c[1]) * (pts[i][1] - c[1]), i});
  }
  std::sort(d.begin(), d.end());
  int ones = 0;
  for (std::size_t j = 0; j < 3; ++j) ones += labels[d[j].second];
  return ones >= 2 ? 1 : 0;
}

Outcome boundary() {
  Rng rng(51);
  std::size_t wrong = 0, cells = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto pts = randomPoints(50, rng);
    std::vector<int> labels(50);
    for (auto& l : labels) l = static_cast<int>(uniformIndex(rng, 2));
    BoundaryConfig cfg;
    cfg.gx = cfg.gy = 32;
    const auto raster = estimateBoundary(pts, labels, cfg);
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t c = 0; c < 32; ++c, ++cells)
        wrong += raster.labels[r * 32 + c] != knnMajority(pts, labels, raster.cellCentre(r, c));
  }
  return {wrong == 0, std::to_string(wrong) + " of " + std::to_string(cells) + " cells differ over 50 instances"};
}

// ---------------------------------------------------------------------------
// Feature visualization and activation filtering on the trained model

struct VisRun {
  std::map<std::size_t, LayerAtlas> atlases;
  std::map<std::size_t, std::vector<double>> baselines;
};

// The atlas layer, every channel.
constexpr std::size_t kVisLayers[] = {4};
constexpr std::size_t kVisChannels = 16;

VisRun runFeatureVis(const Model& model) {
  VisRun run;
  Rng rng(61);
  VisConfig cfg;
  cfg.seed = 7;
  for (std::size_t layer : kVisLayers) {
    std::vector<std::size_t> channels(kVisChannels);
    std::iota(channels.begin(), channels.end(), 0);
    std::vector<double> base(kVisChannels, 0.0);
    for (int i = 0; i < 50; ++i) {
      const auto act = forwardToLayer(model, randomTensor(model.spec.inputShape, rng, 0.0, 1.0), layer)
                           .featureActivation(model.spec, layer);
      for (std::size_t c = 0; c < kVisChannels; ++c) base[c] += meanChannelActivation(act, c) / 50.0;
    }
    run.baselines[layer] = base;
    run.atlases[layer] = generateLayerAtlas(model, layer, cfg, channels);
  }
  return run;
}

Outcome featureVisualization(const VisRun& run) {
  bool ok = true;
  std::string detail;
  for (const auto& [layer, atlas] : run.atlases) {
    std::size_t passed = 0;
    std::string misses;
    for (std::size_t i = 0; i < atlas.images.size(); ++i) {
      const double base = run.baselines.at(layer)[i];
      const double fin = atlas.images[i].finalObjective;
      if (fin > 0.0 && fin >= 5.0 * base) {
        ++passed;
      } else {
        misses += " ch" + std::to_string(i) + " " + fmt(fin / base, 3) + "x";
      }
    }
    ok = ok && passed == atlas.images.size();
    detail += "layer " + std::to_string(layer) + ": " + std::to_string(passed) + "/" +
              std::to_string(atlas.images.size()) + " channels reach 5x noise" +
              (misses.empty() ? "" : " (below:" + misses + ")") + "; ";
  }

  Rng rng(62);
  auto canvas = FourierCanvas::random(rng, 0.05, 16);
  const auto w = randomTensor({16, 16, 2}, rng);
  auto loss = [&](const FourierCanvas& c) {
    const auto img = decodeCanvas(c);
    double s = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) s += img[i] * w[i];
    return s;
  };
  const auto g = spectrumGradient(canvas, w);
  double worstFd = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < canvas.spectrum.size(); k += 5) {
    for (int part = 0; part < 2; ++part) {
      auto cp = canvas, cm = canvas;
      const std::complex<double> d = part ? std::complex<double>(0, h) : std::complex<double>(h, 0);
      cp.spectrum[k] += d;
      cm.spectrum[k] -= d;
      const double fd = (loss(cp) - loss(cm)) / (2 * h);
      worstFd = std::max(worstFd, relativeError(part ? g[k].imag() : g[k].real(), fd, 1e-6));
    }
  }
  const auto img = randomTensor({78, 78, 2}, rng, 0.001, 0.999);
  const auto back = decodeCanvas(encodeImage(img));
  double worstTrip = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) worstTrip = std::max(worstTrip, std::abs(back[i] - img[i]));
  ok = ok && worstFd <= 1e-3 && worstTrip <= 1e-6;
  detail += "spectrum gradient rel err " + fmt(worstFd, 3) + ", round trip " + fmt(worstTrip, 3);
  return {ok, detail};
}

Outcome activationFiltering(const Model& model, const LabeledImageSet& set, const VisRun& run) {
  std::size_t checked = 0, above = 0;
  auto check = [&](const NdTensor& image, std::size_t layer, std::size_t channel) {
    const auto r = activationFilter(image, model, layer, channel);
    for (std::size_t i = 0; i < image.size(); ++i) above += r.filtered[i] > image[i];
    ++checked;
  };
  const auto test = set.indicesOf(Split::Test);
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t layer : kVisLayers) check(set.images[test[k]].pixels, layer, k % kVisChannels);
  for (const auto& [layer, atlas] : run.atlases)
    for (std::size_t i = 0; i < atlas.images.size(); ++i) check(atlas.images[i].pixels, layer, atlas.channels[i]);

  // A channel that ignores its input has a uniform map; filtering is then the identity.
  ArchitectureConfig arch;
  arch.blocks = {{1, 4}, {1, 6}};
  arch.denseSizes = {8};
  arch.inputShape = {12, 12, 2};
  auto flat = buildModel(arch, 63);
  for (std::size_t i = 3; i < flat.params.perLayer[0].weights.size(); i += 4) flat.params.perLayer[0].weights[i] = 0.0;
  flat.params.perLayer[0].bias[3] = 0.4;
  Rng rng(64);
  const auto image = randomTensor({12, 12, 2}, rng, 0.0, 1.0);
  const auto id = activationFilter(image, flat, 1, 3);
  const bool identity = !id.zeroActivation && id.filtered == image && id.consistency == 1.0;

  std::string detail = std::to_string(checked) + " filtered images, " + std::to_string(above) +
                       " pixels above the original; uniform-map identity " + (identity ? "exact" : "NOT exact");
  for (const auto& [layer, atlas] : run.atlases) {
    const auto rep = consistencyReport(model, atlas);
    detail += "; layer " + std::to_string(layer) + " consistency median " + fmt(rep.median);
  }
  return {above == 0 && identity, detail};
}

// ---------------------------------------------------------------------------
// NMF

Outcome nmfCriterion() {
  std::size_t increases = 0, updates = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 7000);
    const auto rows = 4 + uniformIndex(rng, 40), cols = 3 + uniformIndex(rng, 16);
    Matrix A(rows, cols);
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = uniform01(rng) < 0.3 ? 0.0 : uniform(rng, 0, 5);
    NmfConfig cfg;
    cfg.seed = seed;
    const auto r = nmf(A, 1 + uniformIndex(rng, std::min<std::uint64_t>(cols, 6)), cfg);
    for (std::size_t k = 1; k < r.residualHistory.size(); ++k, ++updates) {
      const double prev = r.residualHistory[k - 1];
      increases += r.residualHistory[k] > prev + 1e-10 * std::max(1.0, prev);
    }
  }
  Rng rng(7200);
  Eigen::VectorXd u(30), v(12);
  for (auto& x : u) x = uniform(rng, 0.1, 2.0);
  for (auto& x : v) x = uniform(rng, 0.1, 2.0);
  const Matrix A = u * v.transpose();
  const auto r = nmf(A, 1);
  const double rel = (A - r.W * r.H).norm() / A.norm();
  return {increases == 0 && rel < 1e-4, std::to_string(increases) + " increases over " + std::to_string(updates) +
                                            " updates in 100 runs; rank-1 relative residual " + fmt(rel, 3)};
}

// ---------------------------------------------------------------------------
// DBSCAN

// Partition from density reachability: BFS over core points within eps,
// clusters numbered by their first core point; a border point joins the
// earliest cluster among its core neighbours.
std::vector<int> reachabilityOracle(const std::vector<Point2>& pts, double eps, std::size_t minPts) {
  const std::size_t n = pts.size();
  auto near = [&](std::size_t i, std::size_t j) { return std::hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]) <= eps; };
  std::vector<bool> core(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) c += near(i, j);
    core[i] = c >= minPts;
  }
  std::vector<int> labels(n, kNoise);
  int next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (!core[s] || labels[s] != kNoise) continue;
    std::vector<std::size_t> stack{s};
    labels[s] = next;
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      for (std::size_t j = 0; j < n; ++j)
        if (core[j] && labels[j] == kNoise && near(i, j)) {
          labels[j] = next;
          stack.push_back(j);
        }
    }
    ++next;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (std::size_t j = 0; j < n; ++j)
      if (core[j] && near(i, j) && (labels[i] == kNoise || labels[j] < labels[i])) labels[i] = labels[j];
  }
  return labels;
}

Outcome dbscanCriterion() {
  Rng rng(81);
  std::size_t mismatches = 0, clusters = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 5 + uniformIndex(rng, 196);
    const std::size_t k = 1 + uniformIndex(rng, 4);
    std::vector<Point2> centres, pts;
    for (std::size_t c = 0; c < k; ++c) centres.push_back({uniform(rng, 0, 10), uniform(rng, 0, 10)});
    for (std::size_t i = 0; i < n; ++i) {
      if (uniform01(rng) < 0.15) {
        pts.push_back({uniform(rng, -2, 12), uniform(rng, -2, 12)});
      } else {
        const auto& c = centres[uniformIndex(rng, k)];
        pts.push_back({c[0] + 0.6 * standardNormal(rng), c[1] + 0.6 * standardNormal(rng)});
      }
    }
    const double eps = uniform(rng, 0.2, 1.5);
    const auto minPts = 1 + uniformIndex(rng, 8);
    const auto labels = dbscan(pts, eps, minPts);
    mismatches += labels != reachabilityOracle(pts, eps, minPts);
    clusters += static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end()) + 1);
  }
  return {mismatches == 0, std::to_string(mismatches) + "/100 partitions differ (" + std::to_string(clusters) +
                               " clusters in total)"};
}

// ---------------------------------------------------------------------------
// Cluster weights

Outcome clusterWeightsCriterion() {
  Matrix sums(5, 3);
  sums.col(0) << 1, 2, 3, 4, 10;
  sums.col(1) << 5, 5, 5, 5, 5;
  sums.col(2) << 0, 1, 2, 3, 5;
  const auto w = clusterWeights(sums, {3, 4});
  // Channel 0: medians 7 and 3, population sd sqrt(10); channel 1 has sd 0;
  // channel 2: medians 4 and 2, population variance 2.96.
  const double w0 = 4.0 / std::sqrt(10.0), w2 = 2.0 / std::sqrt(2.96);
  const double norm = std::hypot(w0, w2);
  const double toyErr = std::max({std::abs(w.weights[0] - w0 / norm), std::abs(w.weights[1]),
                                  std::abs(w.weights[2] - w2 / norm)});

  Rng rng(91);
  std::size_t bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix s(40, 12);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = uniform(rng, 0, 3) * (uniform01(rng) < 0.8);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < 40; ++i)
      if (uniform01(rng) < 0.2) members.push_back(i);
    if (members.empty()) members.push_back(0);
    const auto r = clusterWeights(s, members);
    double n2 = 0.0;
    for (double v : r.weights) {
      bad += v < 0.0;
      n2 += v * v;
    }
    bad += r.zeroVector ? n2 != 0.0 : std::abs(std::sqrt(n2) - 1.0) > 1e-12;
  }
  std::vector<std::size_t> everyone(40);
  std::iota(everyone.begin(), everyone.end(), 0);
  Matrix s(40, 12);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = uniform(rng, 0, 3);
  const auto whole = clusterWeights(s, everyone);
  const bool wholeZero = whole.zeroVector && std::all_of(whole.weights.begin(), whole.weights.end(), [](double v) { return v == 0.0; });
  return {toyErr <= 1e-12 && bad == 0 && wholeZero,
          "toy case max error " + fmt(toyErr, 3) + ", " + std::to_string(bad) +
              " non-unit or negative outputs in 100 random clusters, whole-dataset cluster " +
              (wholeZero ? "flagged zero" : "NOT flagged")};
}

// ---------------------------------------------------------------------------
// Determinism

const std::vector<std::vector<std::string>> kPipeline = {
    {"synth", "--seed", "9", "--count", "40"},
    {"train", "--seed", "9", "--arch", "small", "--epochs", "2", "--lr", "0.02"},
    {"eval"},
    {"embed", "--layer", "3", "--perplexity", "5", "--iterations", "300", "--seed", "9"},
    {"gridmap", "--layer", "3", "--fraction", "0.25"},
    {"featvis", "--layer", "2", "--channels", "0-3", "--steps", "16", "--seed", "9"},
    {"actfilter", "--layer", "2", "--top", "4"},
    {"factorize", "--layer", "2", "--groups", "3", "--steps", "8"},
    {"clusters", "--layer", "3", "--min-pts", "4", "--stats-layer", "2", "--steps", "8"},
    {"export"},
};

std::map<std::string, std::vector<std::uint8_t>> bundleContents(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = readFileBytes(e.path());
  return out;
}

Outcome determinism(const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  std::size_t failures = 0;
  setenv("FEATURESCOPE_THREADS", "1", 1);
  for (const auto& step : kPipeline) failures += cli(root / "a", step) != kExitOk;
  unsetenv("FEATURESCOPE_THREADS");
  for (const auto& step : kPipeline) failures += cli(root / "b", step) != kExitOk;
  if (failures) return {false, std::to_string(failures) + " pipeline commands failed"};
  const auto a = bundleContents(root / "a"), b = bundleContents(root / "b");
  std::size_t differing = a.size() == b.size() ? 0 : 1;
  for (const auto& [rel, bytes] : a) differing += !b.count(rel) || b.at(rel) != bytes;

  // Re-running each command in place must leave the bundle unchanged.
  std::size_t changedReruns = 0;
  for (std::size_t i = 1; i < kPipeline.size(); ++i) {
    failures += cli(root / "a", kPipeline[i]) != kExitOk;
    changedReruns += bundleContents(root / "a") != a;
  }
  fs::remove_all(root);
  return {differing == 0 && changedReruns == 0 && failures == 0,
          std::to_string(a.size()) + " files, " + std::to_string(differing) + " differ between runs; " +
              std::to_string(changedReruns) + " of " + std::to_string(kPipeline.size() - 1) +
              " in-place reruns changed the bundle"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <work-dir> [--fresh]\n";
    return 64;
  }
  const fs::path work = argv[1];
  const bool fresh = argc > 2 && std::string(argv[2]) == "--fresh";
  fs::create_directories(work);

  std::size_t failed = 0;
  auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  };

  report("gradient-fidelity", gradientFidelity);
  const auto trained = prepareModel(work, fresh);
  report("classification", [&] { return classification(trained); });
  report("image-filter", filtering);
  report("tsne", tsne);
  report("grid-mapping", gridMapping);
  report("decision-boundary", boundary);

  std::optional<Model> model;
  std::optional<LabeledImageSet> set;
  std::optional<VisRun> vis;
  if (trained.ok) {
    try {
      const auto b = Bundle::open(trained.bundle);
      model = deserializeCheckpoint(readFileBytes(b.path("model/checkpoint.fscp")));
      set = readDatasetDirectory(b.path("datasets"));
      vis = runFeatureVis(*model);
    } catch (const std::exception& e) {
      std::cerr << "trained model unavailable: " << e.what() << "\n";
    }
  }
  report("feature-visualization", [&]() -> Outcome {
    if (!vis) return {false, "no trained model"};
    return featureVisualization(*vis);
  });
  report("activation-filtering", [&]() -> Outcome {
    if (!vis) return {false, "no trained model"};
    return activationFiltering(*model, *set, *vis);
  });
  report("nmf", nmfCriterion);
  report("dbscan", dbscanCriterion);
  report("cluster-weights", clusterWeightsCriterion);
  report("determinism", [&] { return determinism(work); });

  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
