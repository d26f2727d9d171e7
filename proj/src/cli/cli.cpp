#include "featurescope/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <sstream>

#include "featurescope/architecture.hpp"
#include "featurescope/bundle.hpp"
#include "featurescope/enhance.hpp"
#include "featurescope/featurevis.hpp"
#include "featurescope/interpret.hpp"
#include "featurescope/parallel.hpp"
#include "featurescope/training.hpp"

namespace fscope {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kDatasetManifest = "datasets/manifest.jsonl";
const std::string kCheckpoint = "model/checkpoint.fscp";

std::string layerDir(const std::string& area, std::size_t layer) {
  return area + "/layer" + std::to_string(layer);
}

json toJson(const std::vector<Point2>& pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back({p[0], p[1]});
  return a;
}

NdTensor pointsTensor(const std::vector<Point2>& pts) {
  NdTensor t({pts.size(), 2});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t[2 * i] = pts[i][0];
    t[2 * i + 1] = pts[i][1];
  }
  return t;
}

std::vector<Point2> tensorPoints(const NdTensor& t) {
  if (t.rank() != 2 || t.dim(1) != 2) throw Error("expected an N x 2 point tensor, got " + shapeToString(t.shape()));
  std::vector<Point2> pts(t.dim(0));
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {t[2 * i], t[2 * i + 1]};
  return pts;
}

json boundaryJson(const BoundaryRaster& r) {
  json contour = json::array();
  for (const auto& line : r.contour) contour.push_back(toJson(line));
  return {{"gx", r.gx}, {"gy", r.gy}, {"xmin", r.xmin}, {"xmax", r.xmax}, {"ymin", r.ymin}, {"ymax", r.ymax},
          {"labels", r.labels}, {"smoothed", r.smoothed}, {"contour", contour}};
}

json historyJson(const FeatureImage& img) {
  const auto guard = overOptimizationGuard(img.objectiveHistory, img.saturationFraction);
  return {{"objective", img.objective.describe()},
          {"steps", img.steps},
          {"history", img.objectiveHistory},
          {"finalObjective", img.finalObjective},
          {"saturationFraction", img.saturationFraction},
          {"guard", {{"flagged", guard.flagged}, {"reason", guard.reason}}}};
}

// State shared by all commands of one invocation.
struct Context {
  std::string bundlePath;
  std::ostream& out;
  std::ostream& err;

  Bundle open(bool create = false) const { return Bundle::open(bundlePath, create); }

  static LabeledImageSet dataset(const Bundle& b) {
    b.require(kDatasetManifest, "synth");
    return readDatasetDirectory(b.path("datasets"));
  }

  static Model model(const Bundle& b) {
    b.require(kCheckpoint, "train");
    return deserializeCheckpoint(readFileBytes(b.path(kCheckpoint)));
  }
};

std::vector<std::size_t> testIndices(const LabeledImageSet& set) {
  auto idx = set.indicesOf(Split::Test);
  if (idx.empty()) throw BundleError("missing-prerequisite", "dataset has no test split");
  return idx;
}

void checkLayer(const Model& model, std::size_t layer, bool spatial) {
  const auto layers = model.spec.featureLayers();
  if (layer == 0 || layer >= layers.size()) {
    throw Error("layer " + std::to_string(layer) + " is outside 1.." + std::to_string(layers.size() - 1));
  }
  if (spatial && layers[layer].shape.size() != 3) {
    throw Error("layer " + std::to_string(layer) + " has no spatial extent");
  }
}

std::vector<std::size_t> resolveChannels(const Model& model, std::size_t layer, const std::string& text) {
  const auto shape = model.spec.featureLayers()[layer].shape;
  const std::size_t C = shape.back();
  auto channels = parseChannelList(text);
  if (channels.empty()) {
    channels.resize(C);
    for (std::size_t c = 0; c < C; ++c) channels[c] = c;
  }
  for (auto c : channels) {
    if (c >= C) throw Error("channel " + std::to_string(c) + " out of range for layer with " + std::to_string(C));
  }
  return channels;
}

VisConfig visConfig(std::size_t steps, double lr, std::uint64_t seed) {
  VisConfig cfg;
  cfg.steps = steps;
  cfg.learningRate = lr;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

json visConfigJson(const VisConfig& c) {
  return {{"steps", c.steps},         {"lr", c.learningRate}, {"seed", c.seed},
          {"jitterPx", c.jitterPx},   {"scaleLo", c.scaleLo}, {"scaleHi", c.scaleHi},
          {"rotateDeg", c.rotateDeg}, {"initialStddev", c.initialStddev}};
}

void writeFeatureImage(Bundle& b, const std::string& stem, const FeatureImage& img) {
  b.writeTensor(stem + ".tensor", img.pixels);
  b.writePng(stem + ".png", io::falseColour(img.pixels));
}

// ---------------------------------------------------------------------------
// Commands

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t count = 2000;
};

int cmdSynth(const Context& ctx, const SynthArgs& a) {
  auto b = ctx.open(true);
  SynthConfig cfg;
  cfg.seed = a.seed;
  cfg.lymphocyteCount = cfg.neutrophilCount = a.count;
  cfg.validate();
  auto result = generateSyntheticSet(cfg);
  splitDataset(result.set, {}, a.seed);

  const fs::path work = b.root() / ".work";
  fs::remove_all(work);
  writeDatasetDirectory(work, result.set, result.rejections);
  b.replaceDirectory("datasets");
  b.stageDirectory("datasets", work);
  fs::remove_all(work);

  json reasons = json::object();
  for (const auto& r : result.rejections) reasons[rejectReasonName(r.reason)] = reasons.value(rejectReasonName(r.reason), 0) + 1;
  json splits = json::object();
  for (Split s : {Split::Train, Split::Val, Split::Test}) splits[splitName(s)] = result.set.indicesOf(s).size();
  b.writeJson("reports/synth.json", {{"perClass", a.count},
                                     {"images", result.set.size()},
                                     {"rejections", result.rejections.size()},
                                     {"rejectionReasons", reasons},
                                     {"splits", splits}});
  b.setValue("seed", a.seed);
  b.setConfig("synth", {{"seed", a.seed}, {"perClass", a.count}});
  b.commit();
  ctx.out << "synthesized " << result.set.size() << " images (" << result.rejections.size() << " rejected)\n";
  return kExitOk;
}

struct TrainArgs {
  std::uint64_t seed = 0;
  std::size_t epochs = 7;
  double lr = 0.01;
  double decay = 0.7;
  std::size_t batch = 32;
  std::string arch = "default";
};

ArchitectureConfig architecture(const std::string& name) {
  ArchitectureConfig cfg;
  if (name == "small") {
    cfg.blocks = {{1, 8}, {1, 16}};
    cfg.denseSizes = {16};
  } else if (name != "default") {
    throw Error("unknown architecture '" + name + "'");
  }
  return cfg;
}

int cmdTrain(const Context& ctx, const TrainArgs& a) {
  auto b = ctx.open();
  const auto set = Context::dataset(b);
  TrainConfig cfg;
  cfg.seed = a.seed;
  cfg.epochs = a.epochs;
  cfg.learningRate = a.lr;
  cfg.lrDecay = a.decay;
  cfg.batchSize = a.batch;
  cfg.validate();
  const auto initial = buildModel(architecture(a.arch), a.seed);
  const auto result = train(initial, set, cfg, [&](const EpochRecord& e) {
    ctx.out << "epoch " << e.epoch << " loss " << e.trainLoss << " train " << e.trainAccuracy << " val "
            << e.valAccuracy << std::endl;
  });
  const auto bytes = serializeCheckpoint(result.model);
  b.writeBytes(kCheckpoint, bytes);
  json history = json::array();
  for (const auto& e : result.history) {
    history.push_back({{"epoch", e.epoch}, {"trainLoss", e.trainLoss}, {"trainAccuracy", e.trainAccuracy},
                       {"valAccuracy", e.valAccuracy}});
  }
  b.writeJson("reports/training.json",
              {{"history", history}, {"bestEpoch", result.bestEpoch}, {"stoppedEarly", result.stoppedEarly}});
  b.setValue("modelHash", sha256Hex(bytes));
  b.setConfig("train", {{"seed", a.seed}, {"epochs", a.epochs}, {"lr", a.lr}, {"lrDecay", a.decay},
                        {"batchSize", a.batch}, {"momentum", cfg.momentum}, {"dropout", cfg.dropout},
                        {"architecture", a.arch}});
  b.commit();
  ctx.out << "best epoch " << result.bestEpoch << "\n";
  return kExitOk;
}

int cmdEval(const Context& ctx) {
  auto b = ctx.open();
  const auto set = Context::dataset(b);
  const auto model = Context::model(b);
  const auto idx = testIndices(set);
  const auto preds = predict(model, set, idx);
  std::vector<std::size_t> truth, predicted;
  json rows = json::array();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& img = set.images[idx[k]];
    truth.push_back(static_cast<std::size_t>(img.label));
    predicted.push_back(preds[k].predicted);
    rows.push_back({{"id", img.id},
                    {"label", static_cast<int>(img.label)},
                    {"predicted", preds[k].predicted},
                    {"probabilities", {preds[k].probabilities[0], preds[k].probabilities[1]}}});
  }
  const auto cm = ConfusionMatrix::fromLabels(truth, predicted);
  b.writeJson("reports/confusion.json",
              {{"counts", cm.counts}, {"perClassAccuracy", cm.perClassAccuracy}, {"overall", cm.overall},
               {"classes", {cellClassName(CellClass::Lymphocyte), cellClassName(CellClass::Neutrophil)}}});
  b.writeJson("reports/predictions.json", rows);
  b.commit();
  ctx.out << "test accuracy " << cm.overall << "\n";
  return kExitOk;
}

struct EmbedArgs {
  std::size_t layer = 11;
  double perplexity = 30.0;
  std::uint64_t seed = 0;
  std::size_t iterations = 1000;
};

int cmdEmbed(const Context& ctx, const EmbedArgs& a) {
  auto b = ctx.open();
  const auto model = Context::model(b);
  const auto set = Context::dataset(b);
  checkLayer(model, a.layer, false);
  const auto idx = testIndices(set);
  TsneConfig cfg;
  cfg.perplexity = a.perplexity;
  cfg.seed = a.seed;
  cfg.iterations = a.iterations;
  cfg.momentumSwitch = std::min(cfg.momentumSwitch, a.iterations);
  cfg.exaggerationIterations = std::min(cfg.exaggerationIterations, a.iterations);
  cfg.validate(idx.size());
  const auto emb = embedLayer(model, set, idx, a.layer, cfg);
  const auto preds = predict(model, set, idx);
  const auto decor = decoratePoints(emb, set, idx, preds);

  const std::string dir = layerDir("embeddings", a.layer);
  const auto points = serializeTensor(pointsTensor(emb.points));
  // Grid-mapping output derives from the points and stays valid while they do.
  const auto& files = b.files();
  const auto old = files.find(dir + "/points.tensor");
  if (old == files.end() || old->second.sha256 != sha256Hex(points)) b.replaceDirectory(dir);
  b.writeBytes(dir + "/points.tensor", points);
  b.writeJson(dir + "/ids.json", emb.pointIds);
  json kl = json::array();
  for (const auto& c : emb.klHistory) kl.push_back({c.iteration, c.kl});
  b.writeJson(dir + "/embedding.json", {{"algorithm", cfg.algorithm},
                                        {"layer", a.layer},
                                        {"layerName", model.spec.featureLayers()[a.layer].name},
                                        {"perplexity", cfg.perplexity},
                                        {"iterations", cfg.iterations},
                                        {"learningRate", cfg.learningRate},
                                        {"seed", cfg.seed},
                                        {"initialKl", emb.initialKl},
                                        {"klAfterExaggeration", emb.klAfterExaggeration},
                                        {"finalKl", emb.finalKl},
                                        {"klHistory", kl}});
  json decorations = json::array();
  std::vector<int> predicted;
  for (const auto& d : decor) {
    decorations.push_back({{"predicted", d.predictedClass},
                           {"label", d.trueClass},
                           {"misclassified", d.misclassified},
                           {"certainty", d.certainty},
                           {"radiusCertainty", d.radiusCertainty},
                           {"radiusUncertainty", d.radiusUncertainty}});
    predicted.push_back(static_cast<int>(d.predictedClass));
  }
  b.writeJson(dir + "/decorations.json", decorations);
  b.writeJson(dir + "/boundary.json", boundaryJson(estimateBoundary(emb.points, predicted)));
  b.setConfig("embed/layer" + std::to_string(a.layer),
              {{"perplexity", a.perplexity}, {"seed", a.seed}, {"iterations", a.iterations}});
  b.commit();
  ctx.out << "embedded " << emb.points.size() << " points from layer " << a.layer << ", KL " << emb.finalKl << "\n";
  return kExitOk;
}

struct GridArgs {
  std::size_t layer = 11;
  double fraction = 0.5;
};

int cmdGridmap(const Context& ctx, const GridArgs& a) {
  auto b = ctx.open();
  const std::string dir = layerDir("embeddings", a.layer);
  b.require(dir + "/points.tensor", "embed --layer " + std::to_string(a.layer));
  const auto points = tensorPoints(b.readTensor(dir + "/points.tensor"));
  const auto decor = b.readJson(dir + "/decorations.json");
  std::vector<int> predicted;
  for (const auto& d : decor) predicted.push_back(d.at("predicted").get<int>());
  const auto map = gridMap(points);
  b.writeJson(dir + "/grid.json", {{"rows", map.rows}, {"cols", map.cols}, {"assignment", map.assignment},
                                   {"cost", map.cost}, {"fraction", a.fraction}});
  b.writeTensor(dir + "/grid_points.tensor", pointsTensor(map.gridCoords));
  b.writeTensor(dir + "/interpolated.tensor", pointsTensor(interpolateGridMap(points, map, a.fraction)));
  b.writeJson(dir + "/grid_boundary.json", boundaryJson(boundaryOnGrid(map, predicted)));
  b.setConfig("gridmap/layer" + std::to_string(a.layer), {{"fraction", a.fraction}});
  b.commit();
  ctx.out << "grid " << map.rows << "x" << map.cols << " cost " << map.cost << "\n";
  return kExitOk;
}

struct VisArgs {
  std::size_t layer = 4;
  std::string channels = "all";
  std::size_t steps = 512;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

int cmdFeatvis(const Context& ctx, const VisArgs& a) {
  auto b = ctx.open();
  const auto model = Context::model(b);
  checkLayer(model, a.layer, false);
  const auto channels = resolveChannels(model, a.layer, a.channels);
  const auto cfg = visConfig(a.steps, a.lr, a.seed);
  const auto atlas = generateLayerAtlas(model, a.layer, cfg, channels, channels.size() >= 6);
  const std::string dir = layerDir("features", a.layer) + "/vis";
  b.replaceDirectory(dir);
  json runs = json::array();
  for (std::size_t i = 0; i < atlas.images.size(); ++i) {
    writeFeatureImage(b, dir + "/channel" + std::to_string(atlas.channels[i]), atlas.images[i]);
    auto h = historyJson(atlas.images[i]);
    h["channel"] = atlas.channels[i];
    runs.push_back(h);
  }
  json cells = json::array();
  for (auto c : atlas.cells) cells.push_back(c == LayerAtlas::kEmptyCell ? json(nullptr) : json(atlas.channels[c]));
  b.writeJson(dir + "/atlas.json", {{"layer", a.layer}, {"channels", atlas.channels}, {"rows", atlas.rows},
                                    {"cols", atlas.cols}, {"cells", cells}, {"runs", runs},
                                    {"config", visConfigJson(cfg)}});
  b.setConfig("featvis/layer" + std::to_string(a.layer), visConfigJson(cfg));
  b.commit();
  ctx.out << "generated " << atlas.images.size() << " feature images for layer " << a.layer << "\n";
  return kExitOk;
}

struct FilterArgs {
  std::size_t layer = 4;
  std::string channels = "all";
  std::size_t top = 9;
};

int cmdActfilter(const Context& ctx, const FilterArgs& a) {
  auto b = ctx.open();
  const auto model = Context::model(b);
  const auto set = Context::dataset(b);
  checkLayer(model, a.layer, false);
  const std::string visDir = layerDir("features", a.layer) + "/vis";
  b.require(visDir + "/atlas.json", "featvis --layer " + std::to_string(a.layer));
  const auto atlasJson = b.readJson(visDir + "/atlas.json");
  auto channels = parseChannelList(a.channels);
  if (channels.empty()) channels = atlasJson.at("channels").get<std::vector<std::size_t>>();
  for (auto c : channels) b.require(visDir + "/channel" + std::to_string(c) + ".tensor", "featvis --channels " + std::to_string(c));

  std::vector<FilterResult> results(channels.size());
  parallelFor(channels.size(), [&](std::size_t i) {
    const auto img = b.readTensor(visDir + "/channel" + std::to_string(channels[i]) + ".tensor");
    results[i] = activationFilter(img, model, a.layer, channels[i]);
  });
  const std::string dir = layerDir("features", a.layer) + "/filtered";
  b.replaceDirectory(dir);
  std::vector<double> scores;
  std::vector<bool> zero;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const std::string stem = dir + "/channel" + std::to_string(channels[i]);
    b.writeTensor(stem + ".tensor", results[i].filtered);
    b.writePng(stem + ".png", io::falseColour(results[i].filtered));
    b.writeTensor(stem + "_mask.tensor",
                  NdTensor({results[i].filtered.dim(0), results[i].filtered.dim(1)}, results[i].mask));
    scores.push_back(results[i].consistency);
    zero.push_back(results[i].zeroActivation);
  }
  const double med = scores.empty() ? 0.0 : median(scores);
  b.writeJson(dir + "/consistency.json",
              {{"layer", a.layer}, {"channels", channels}, {"scores", scores}, {"zeroActivation", zero}, {"median", med}});

  const auto idx = testIndices(set);
  const Matrix sums = channelSums(model, set, idx, a.layer);
  json maximal = json::object();
  for (auto c : channels) {
    const auto m = maximalImages(sums, set, idx, c, a.top);
    json entries = json::array();
    for (std::size_t k = 0; k < m.ids.size(); ++k) entries.push_back({{"id", m.ids[k]}, {"sum", m.sums[k]}});
    maximal[std::to_string(c)] = {{"images", entries}, {"clamped", m.clamped}};
  }
  b.writeJson(dir + "/maximal.json", maximal);
  b.setConfig("actfilter/layer" + std::to_string(a.layer), {{"top", a.top}});
  b.commit();
  ctx.out << "median consistency " << med << " over " << channels.size() << " channels\n";
  return kExitOk;
}

struct FactorArgs {
  std::size_t layer = 4;
  std::size_t groups = kDefaultNeuronGroups;
  std::uint64_t seed = 0;
  std::string image;
  std::size_t steps = 256;
  double lr = 0.05;
};

int cmdFactorize(const Context& ctx, const FactorArgs& a) {
  auto b = ctx.open();
  const auto model = Context::model(b);
  const auto set = Context::dataset(b);
  checkLayer(model, a.layer, true);
  std::size_t index = testIndices(set).front();
  if (!a.image.empty()) {
    const auto it = std::find_if(set.images.begin(), set.images.end(), [&](const CellImage& c) { return c.id == a.image; });
    if (it == set.images.end()) throw Error("no image with id '" + a.image + "'");
    index = static_cast<std::size_t>(it - set.images.begin());
  }
  const auto& image = set.images[index];
  const auto trace = forwardToLayer(model, image.pixels, a.layer);
  const auto groups = factorizeActivations(trace, model.spec, a.layer, a.groups, a.seed);

  const std::string dir = layerDir("features", a.layer) + "/groups/" + image.id;
  b.replaceDirectory(dir);
  NdTensor maps({groups.height, groups.width, a.groups});
  NdTensor directions({a.groups, groups.directions.front().size()});
  for (std::size_t k = 0; k < a.groups; ++k) {
    for (std::size_t p = 0; p < groups.height * groups.width; ++p) maps[p * a.groups + k] = groups.groupMaps[k].values[p];
    for (std::size_t c = 0; c < groups.directions[k].size(); ++c) directions[k * directions.dim(1) + c] = groups.directions[k][c];
  }
  b.writeTensor(dir + "/maps.tensor", maps);
  b.writeTensor(dir + "/directions.tensor", directions);
  b.writePng(dir + "/groups.png", io::rgbTensorToImage(groups.render.composite));
  b.writeJson(dir + "/factorization.json", {{"image", image.id},
                                            {"layer", a.layer},
                                            {"groups", a.groups},
                                            {"seed", a.seed},
                                            {"hues", groups.render.hues},
                                            {"iterations", groups.factorization.iterations},
                                            {"converged", groups.factorization.converged},
                                            {"residualHistory", groups.factorization.residualHistory}});
  if (a.steps > 0) {
    const auto cfg = visConfig(a.steps, a.lr, a.seed);
    const auto objectives = groups.objectives();
    std::vector<FeatureImage> images(objectives.size());
    parallelFor(objectives.size(), [&](std::size_t k) { images[k] = optimize(model, objectives[k], cfg); });
    json runs = json::array();
    for (std::size_t k = 0; k < images.size(); ++k) {
      writeFeatureImage(b, dir + "/group" + std::to_string(k), images[k]);
      runs.push_back(historyJson(images[k]));
    }
    b.writeJson(dir + "/group_images.json", {{"runs", runs}, {"config", visConfigJson(cfg)}});
  }
  b.setConfig("factorize/layer" + std::to_string(a.layer),
              {{"groups", a.groups}, {"seed", a.seed}, {"image", image.id}, {"steps", a.steps}, {"lr", a.lr}});
  b.commit();
  ctx.out << "factorized " << image.id << " into " << a.groups << " groups\n";
  return kExitOk;
}

struct ClusterArgs {
  std::size_t layer = 11;
  double eps = 0.0;
  std::size_t minPts = 5;
  std::size_t steps = 512;
  double lr = 0.05;
  std::uint64_t seed = 0;
  std::size_t statsLayer = 0;
};

int cmdClusters(const Context& ctx, const ClusterArgs& a) {
  auto b = ctx.open();
  const auto model = Context::model(b);
  const auto set = Context::dataset(b);
  const std::string embDir = layerDir("embeddings", a.layer);
  b.require(embDir + "/points.tensor", "embed --layer " + std::to_string(a.layer));
  Embedding2D emb;
  emb.points = tensorPoints(b.readTensor(embDir + "/points.tensor"));
  emb.pointIds = b.readJson(embDir + "/ids.json").get<std::vector<std::string>>();
  emb.sourceLayer = a.layer;
  std::vector<std::size_t> idx;
  {
    std::map<std::string, std::size_t> byId;
    for (std::size_t i = 0; i < set.size(); ++i) byId[set.images[i].id] = i;
    for (const auto& id : emb.pointIds) {
      const auto it = byId.find(id);
      if (it == byId.end()) throw BundleError("stale-embedding", "embedded image '" + id + "' is not in the dataset");
      idx.push_back(it->second);
    }
  }
  // Weights describe a spatial layer; the clustered layer when it is one.
  const std::size_t statsLayer = a.statsLayer ? a.statsLayer : a.layer;
  checkLayer(model, statsLayer, false);
  const auto cfg = visConfig(a.steps, a.lr, a.seed);
  const auto vis = visualizeClusters(emb, set, idx, model, statsLayer, a.eps, a.minPts, cfg, a.steps > 0);

  const std::string dir = layerDir("clusters", a.layer);
  b.replaceDirectory(dir);
  b.writeJson(dir + "/labels.json", vis.labels);
  json clusters = json::array();
  for (std::size_t c = 0; c < vis.clusterCount; ++c) {
    const auto& w = vis.weights[c];
    json entry = {{"cluster", c},
                  {"size", std::count(vis.labels.begin(), vis.labels.end(), static_cast<int>(c))},
                  {"weights", w.weights},
                  {"zeroVector", w.zeroVector}};
    if (vis.images[c]) {
      writeFeatureImage(b, dir + "/cluster" + std::to_string(c), *vis.images[c]);
      entry["run"] = historyJson(*vis.images[c]);
    }
    clusters.push_back(entry);
  }
  b.writeJson(dir + "/clusters.json", {{"eps", vis.eps},
                                       {"minPts", vis.minPts},
                                       {"statsLayer", statsLayer},
                                       {"clusterCount", vis.clusterCount},
                                       {"advisory", vis.advisory},
                                       {"clusters", clusters}});
  b.setConfig("clusters/layer" + std::to_string(a.layer),
              {{"eps", a.eps}, {"minPts", a.minPts}, {"statsLayer", statsLayer}, {"vis", visConfigJson(cfg)}});
  b.commit();
  ctx.out << vis.clusterCount << " clusters at eps " << vis.eps << "\n";
  if (!vis.advisory.empty()) ctx.out << "note: " << vis.advisory << "\n";
  return kExitOk;
}

int cmdExport(const Context& ctx) {
  auto b = ctx.open();
  const auto bad = b.verify();
  if (!bad.empty()) {
    std::string list;
    for (const auto& f : bad) list += (list.empty() ? "" : ", ") + f;
    throw BundleError("hash-mismatch", "content differs from the manifest: " + list);
  }
  json layers = json::object();
  json features = json::array();
  json clusters = json::array();
  for (const auto& [rel, entry] : b.files()) {
    const fs::path p(rel);
    if (p.filename() == "points.tensor" && rel.rfind("embeddings/", 0) == 0) {
      const std::string dir = p.parent_path().generic_string();
      json item = {{"points", rel}, {"ids", dir + "/ids.json"}, {"decorations", dir + "/decorations.json"},
                   {"boundary", dir + "/boundary.json"}};
      if (b.has(dir + "/grid.json")) {
        item["grid"] = dir + "/grid.json";
        item["gridPoints"] = dir + "/grid_points.tensor";
        item["gridBoundary"] = dir + "/grid_boundary.json";
      }
      layers[p.parent_path().filename().string()] = item;
    } else if (p.filename() == "atlas.json") {
      features.push_back(rel);
    } else if (p.filename() == "clusters.json") {
      clusters.push_back(rel);
    }
  }
  b.writeJson("index.json", {{"version", kBundleVersion},
                             {"seed", b.manifest().value("seed", json(nullptr))},
                             {"modelHash", b.manifest().value("modelHash", json(nullptr))},
                             {"dataset", b.has(kDatasetManifest) ? json(kDatasetManifest) : json(nullptr)},
                             {"embeddings", layers},
                             {"featureAtlases", features},
                             {"clusters", clusters}});
  b.commit();
  ctx.out << "bundle verified: " << b.files().size() << " files\n";
  return kExitOk;
}

void errorJson(std::ostream& err, const std::string& code, const std::string& detail) {
  err << json{{"error", code}, {"detail", detail}}.dump() << "\n";
}

}  // namespace

std::vector<std::size_t> parseChannelList(const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "all") return out;
  std::stringstream ss(text);
  std::string item;
  auto number = [&](const std::string& s) -> std::size_t {
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw CLI::ValidationError("--channels", "'" + text + "' is not a channel list");
    }
    return std::stoul(s);
  };
  while (std::getline(ss, item, ',')) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      out.push_back(number(item));
    } else {
      const auto lo = number(item.substr(0, dash)), hi = number(item.substr(dash + 1));
      if (hi < lo) throw CLI::ValidationError("--channels", "descending range '" + item + "'");
      for (auto c = lo; c <= hi; ++c) out.push_back(c);
    }
  }
  std::vector<std::size_t> seen;
  for (auto c : out) {
    if (std::find(seen.begin(), seen.end(), c) == seen.end()) seen.push_back(c);
  }
  return seen;
}

int runCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train a cell classifier and export interpretability artifacts into a bundle directory.",
               "featurescope"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  std::string bundle;
  app.add_option("--bundle", bundle, "Bundle directory")->required();

  auto channelCheck = CLI::Validator(
      [](std::string& s) {
        try {
          parseChannelList(s);
        } catch (const CLI::ValidationError& e) {
          return std::string(e.what());
        }
        return std::string();
      },
      "LIST", "channel list");

  SynthArgs synth;
  auto* sSynth = app.add_subcommand("synth", "Generate, filter and split the synthetic image set");
  sSynth->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  sSynth->add_option("--count", synth.count, "Images per class")->capture_default_str()->check(CLI::PositiveNumber);

  TrainArgs trainArgs;
  auto* sTrain = app.add_subcommand("train", "Train the classifier on the bundle dataset");
  sTrain->add_option("--seed", trainArgs.seed, "Initialization and shuffling seed")->capture_default_str();
  sTrain->add_option("--epochs", trainArgs.epochs, "Epochs")->capture_default_str()->check(CLI::PositiveNumber);
  sTrain->add_option("--lr", trainArgs.lr, "Learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  sTrain->add_option("--decay", trainArgs.decay, "Per-epoch learning-rate multiplier")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  sTrain->add_option("--batch", trainArgs.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  sTrain->add_option("--arch", trainArgs.arch, "Architecture")
      ->capture_default_str()
      ->check(CLI::IsMember({"default", "small"}));

  auto* sEval = app.add_subcommand("eval", "Confusion matrix and predictions on the test split");

  EmbedArgs embed;
  auto* sEmbed = app.add_subcommand("embed", "t-SNE embedding of one layer's feature tensors");
  sEmbed->add_option("--layer", embed.layer, "Feature layer index")->capture_default_str();
  sEmbed->add_option("--perplexity", embed.perplexity, "Perplexity")->capture_default_str()->check(CLI::PositiveNumber);
  sEmbed->add_option("--seed", embed.seed, "Layout seed")->capture_default_str();
  sEmbed->add_option("--iterations", embed.iterations, "Iterations")->capture_default_str()->check(CLI::PositiveNumber);

  GridArgs grid;
  auto* sGrid = app.add_subcommand("gridmap", "Assign an embedding to a grid");
  sGrid->add_option("--layer", grid.layer, "Feature layer index")->capture_default_str();
  sGrid->add_option("--fraction", grid.fraction, "Interpolation fraction toward the grid")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));

  VisArgs vis;
  auto* sVis = app.add_subcommand("featvis", "Feature images by optimization");
  sVis->add_option("--layer", vis.layer, "Feature layer index")->capture_default_str();
  sVis->add_option("--channels", vis.channels, "Channels, e.g. 0-7,12 or all")->capture_default_str()->check(channelCheck);
  sVis->add_option("--steps", vis.steps, "Optimization steps")->capture_default_str()->check(CLI::PositiveNumber);
  sVis->add_option("--lr", vis.lr, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  sVis->add_option("--seed", vis.seed, "Canvas and transform seed")->capture_default_str();

  FilterArgs filt;
  auto* sFilt = app.add_subcommand("actfilter", "Activation-filtered feature images and maximal images");
  sFilt->add_option("--layer", filt.layer, "Feature layer index")->capture_default_str();
  sFilt->add_option("--channels", filt.channels, "Channels (default: all generated)")
      ->capture_default_str()
      ->check(channelCheck);
  sFilt->add_option("--top", filt.top, "Maximal images per channel")->capture_default_str()->check(CLI::PositiveNumber);

  FactorArgs fact;
  auto* sFact = app.add_subcommand("factorize", "Neuron groups of one image by NMF");
  sFact->add_option("--layer", fact.layer, "Feature layer index")->capture_default_str();
  sFact->add_option("--groups", fact.groups, "Number of groups")->capture_default_str()->check(CLI::PositiveNumber);
  sFact->add_option("--seed", fact.seed, "Initialization seed")->capture_default_str();
  sFact->add_option("--image", fact.image, "Image id (default: first test image)");
  sFact->add_option("--steps", fact.steps, "Steps per group image, 0 to skip")->capture_default_str();
  sFact->add_option("--lr", fact.lr, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);

  ClusterArgs clus;
  auto* sClus = app.add_subcommand("clusters", "DBSCAN clusters of an embedding and their feature images");
  sClus->add_option("--layer", clus.layer, "Embedded layer index")->capture_default_str();
  sClus->add_option("--eps", clus.eps, "Neighbourhood radius, 0 for the k-distance knee")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  sClus->add_option("--min-pts", clus.minPts, "Neighbours needed for a core point, itself included")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sClus->add_option("--stats-layer", clus.statsLayer, "Layer for cluster weights (default: --layer)");
  sClus->add_option("--steps", clus.steps, "Steps per cluster image, 0 to skip")->capture_default_str();
  sClus->add_option("--lr", clus.lr, "Adam learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  sClus->add_option("--seed", clus.seed, "Canvas and transform seed")->capture_default_str();

  auto* sExport = app.add_subcommand("export", "Verify hashes and write the explorer index");

  std::vector<std::string> argvStore{"featurescope"};
  argvStore.insert(argvStore.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argvStore) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    errorJson(err, "usage", e.what());
    return kExitUsage;
  }

  const Context ctx{bundle, out, err};
  try {
    if (sSynth->parsed()) return cmdSynth(ctx, synth);
    if (sTrain->parsed()) return cmdTrain(ctx, trainArgs);
    if (sEval->parsed()) return cmdEval(ctx);
    if (sEmbed->parsed()) return cmdEmbed(ctx, embed);
    if (sGrid->parsed()) return cmdGridmap(ctx, grid);
    if (sVis->parsed()) return cmdFeatvis(ctx, vis);
    if (sFilt->parsed()) return cmdActfilter(ctx, filt);
    if (sFact->parsed()) return cmdFactorize(ctx, fact);
    if (sClus->parsed()) return cmdClusters(ctx, clus);
    if (sExport->parsed()) return cmdExport(ctx);
  } catch (const BundleError& e) {
    errorJson(err, e.code(), e.what());
    return kExitBundle;
  } catch (const std::exception& e) {
    errorJson(err, "failed", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace fscope
