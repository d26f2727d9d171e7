#include <array>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "featurescope/dataset.hpp"
#include "featurescope/image_io.hpp"
#include "featurescope/random.hpp"

namespace fscope {

const char* cellClassName(CellClass label) {
  return label == CellClass::Lymphocyte ? "lymphocyte" : "neutrophil";
}

const char* splitName(Split split) {
  switch (split) {
    case Split::Unassigned: return "unassigned";
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unassigned";
}

CellClass parseCellClass(const std::string& name) {
  if (name == "lymphocyte") return CellClass::Lymphocyte;
  if (name == "neutrophil") return CellClass::Neutrophil;
  throw Error("unknown cell class '" + name + "'");
}

Split parseSplit(const std::string& name) {
  for (Split s : {Split::Unassigned, Split::Train, Split::Val, Split::Test}) {
    if (name == splitName(s)) return s;
  }
  throw Error("unknown split '" + name + "'");
}

std::vector<std::size_t> LabeledImageSet::indicesOf(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> LabeledImageSet::allIndices() const {
  std::vector<std::size_t> out(images.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

std::size_t LabeledImageSet::countOf(CellClass label, std::optional<Split> split) const {
  std::size_t n = 0;
  for (const auto& image : images) {
    if (image.label == label && (!split || image.split == *split)) ++n;
  }
  return n;
}

void splitDataset(LabeledImageSet& set, const SplitRatios& ratios, std::uint64_t seed) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  for (double v : r) {
    if (!(v >= 0.0)) throw Error("split ratios must be nonnegative");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw Error("split ratios must sum to 1");
  const std::size_t used = (r[0] > 0) + (r[1] > 0) + (r[2] > 0);

  for (CellClass label : {CellClass::Lymphocyte, CellClass::Neutrophil}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < set.images.size(); ++i) {
      if (set.images[i].label == label) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < used) {
      throw Error(std::string("class ") + cellClassName(label) + " has " +
                  std::to_string(members.size()) + " images, fewer than the " +
                  std::to_string(used) + " requested splits");
    }
    Rng rng(seed ^ (0x5851F42D4C957F2DULL * (static_cast<std::uint64_t>(label) + 1)));
    shuffle(members, rng);
    const std::size_t n = members.size();
    std::size_t nTrain = static_cast<std::size_t>(std::llround(r[0] * n));
    std::size_t nVal = static_cast<std::size_t>(std::llround(r[1] * n));
    nTrain = std::min(nTrain, n);
    nVal = std::min(nVal, n - nTrain);
    if (r[2] == 0.0) nVal = n - nTrain;
    for (std::size_t k = 0; k < n; ++k) {
      set.images[members[k]].split =
          k < nTrain ? Split::Train : (k < nTrain + nVal ? Split::Val : Split::Test);
    }
  }
}

void writeDatasetDirectory(const std::filesystem::path& dir, const LabeledImageSet& set,
                           const std::vector<Rejection>& rejections) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw Error("cannot write dataset manifest in " + dir.string());
  for (const auto& image : set.images) {
    io::writePng(dir / "images" / (image.id + "_ch0.png"), io::channelToGray16(image.pixels, 0));
    io::writePng(dir / "images" / (image.id + "_ch1.png"), io::channelToGray16(image.pixels, 1));
    nlohmann::ordered_json line{{"id", image.id},
                                {"label", cellClassName(image.label)},
                                {"split", splitName(image.split)}};
    manifest << line.dump() << '\n';
  }
  for (const auto& r : rejections) {
    nlohmann::ordered_json line{{"id", r.id},
                                {"label", cellClassName(r.label)},
                                {"split", nullptr},
                                {"rejectionReason", rejectReasonName(r.reason)}};
    manifest << line.dump() << '\n';
  }
}

LabeledImageSet readDatasetDirectory(const std::filesystem::path& dir,
                                     std::vector<Rejection>* rejections) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw Error("dataset manifest missing in " + dir.string());
  LabeledImageSet set;
  std::string text;
  while (std::getline(manifest, text)) {
    if (text.empty()) continue;
    const auto line = nlohmann::json::parse(text);
    const auto label = parseCellClass(line.at("label").get<std::string>());
    if (line.contains("rejectionReason")) {
      if (rejections) {
        const auto reason = line.at("rejectionReason").get<std::string>();
        RejectReason parsed = RejectReason::EmptyChannel;
        for (auto r : {RejectReason::EmptyChannel, RejectReason::SaturatedBorder,
                       RejectReason::CentroidDistance, RejectReason::WeakChannel}) {
          if (reason == rejectReasonName(r)) parsed = r;
        }
        rejections->push_back({line.at("id").get<std::string>(), label, parsed});
      }
      continue;
    }
    CellImage image;
    image.id = line.at("id").get<std::string>();
    image.label = label;
    image.split = parseSplit(line.at("split").get<std::string>());
    const auto c0 = io::readGray16Png(dir / "images" / (image.id + "_ch0.png"));
    const auto c1 = io::readGray16Png(dir / "images" / (image.id + "_ch1.png"));
    if (c0.width != c1.width || c0.height != c1.height) {
      throw Error("channel images of " + image.id + " differ in size");
    }
    image.pixels = NdTensor({c0.height, c0.width, 2});
    for (std::size_t i = 0; i < c0.pixels.size(); ++i) {
      image.pixels[2 * i] = c0.pixels[i] / 65535.0;
      image.pixels[2 * i + 1] = c1.pixels[i] / 65535.0;
    }
    set.images.push_back(std::move(image));
  }
  return set;
}

}  // namespace fscope
