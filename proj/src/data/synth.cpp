#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "featurescope/dataset.hpp"
#include "featurescope/random.hpp"

namespace fscope {

MorphologyParams MorphologyParams::lymphocyte() {
  MorphologyParams p;
  p.lobesMin = 1;
  p.lobesMax = 1;
  p.lobeRadiusMin = 7.0;
  p.lobeRadiusMax = 10.5;
  p.lobeSpreadMin = 0.0;
  p.lobeSpreadMax = 1.5;
  p.cellRadiusMin = 10.5;
  p.cellRadiusMax = 15.0;
  return p;
}

MorphologyParams MorphologyParams::neutrophil() {
  MorphologyParams p;
  p.lobesMin = 2;
  p.lobesMax = 5;
  p.lobeRadiusMin = 5.0;
  p.lobeRadiusMax = 7.5;
  p.lobeSpreadMin = 3.5;
  p.lobeSpreadMax = 7.5;
  p.cellRadiusMin = 14.0;
  p.cellRadiusMax = 20.0;
  return p;
}

void SynthConfig::validate() const {
  if (lymphocyteCount == 0 || neutrophilCount == 0) throw Error("synthetic class counts must be positive");
  if (imageSize < 32) throw Error("synthetic image size must be at least 32");
  for (const auto* m : {&lymphocyte, &neutrophil}) {
    if (m->lobesMin == 0 || m->lobesMax < m->lobesMin) throw Error("invalid lobe count range");
    if (m->lobeRadiusMin <= 0 || m->cellRadiusMin <= 0 || m->lobeRadiusMax < m->lobeRadiusMin ||
        m->cellRadiusMax < m->cellRadiusMin) {
      throw Error("morphology radii must be positive ranges");
    }
  }
  if (noiseLevel < 0 || backgroundLevel < 0) throw Error("noise and background must be nonnegative");
  if (defectRate < 0 || defectRate > 1) throw Error("defect rate must be a probability");
}

namespace {

double softStep(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class Defect { None, DisplacedNucleus, SpeckNucleus, SaturatedEdge };

}  // namespace

NdTensor renderRawCell(CellClass label, const SynthConfig& config, std::uint64_t captureSeed,
                       RawCellInfo* info) {
  const auto& m = label == CellClass::Lymphocyte ? config.lymphocyte : config.neutrophil;
  Rng rng(captureSeed);
  const std::size_t S = config.imageSize;
  const double mid = 0.5 * (static_cast<double>(S) - 1.0);
  const double cy = mid + uniform(rng, -config.centreJitter, config.centreJitter);
  const double cx = mid + uniform(rng, -config.centreJitter, config.centreJitter);
  const double cellR = uniform(rng, m.cellRadiusMin, m.cellRadiusMax);
  const double aspect = uniform(rng, 0.85, 1.15);
  const double orient = uniform(rng, 0.0, std::numbers::pi);
  const double cytoI = uniform(rng, m.cytoplasmIntensityMin, m.cytoplasmIntensityMax);
  const double nucI = uniform(rng, m.nucleusIntensityMin, m.nucleusIntensityMax);

  struct Lobe {
    double y, x, r;
  };
  const std::size_t lobeCount =
      m.lobesMin + static_cast<std::size_t>(uniformIndex(rng, m.lobesMax - m.lobesMin + 1));
  const double base = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  std::vector<Lobe> lobes;
  for (std::size_t k = 0; k < lobeCount; ++k) {
    const double angle = base + 2.0 * std::numbers::pi * k / lobeCount + uniform(rng, -0.35, 0.35);
    const double spread = uniform(rng, m.lobeSpreadMin, m.lobeSpreadMax);
    lobes.push_back({cy + spread * std::sin(angle), cx + spread * std::cos(angle),
                     uniform(rng, m.lobeRadiusMin, m.lobeRadiusMax)});
  }

  Defect defect = Defect::None;
  if (uniform01(rng) < config.defectRate) {
    defect = static_cast<Defect>(1 + uniformIndex(rng, 3));
  }
  if (defect == Defect::DisplacedNucleus) {
    const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double shift = uniform(rng, 20.0, 26.0);
    for (auto& lobe : lobes) {
      lobe.y = std::clamp(lobe.y + shift * std::sin(angle), 6.0, S - 7.0);
      lobe.x = std::clamp(lobe.x + shift * std::cos(angle), 6.0, S - 7.0);
    }
  } else if (defect == Defect::SpeckNucleus) {
    lobes = {{cy, cx, 1.5}};
  }

  // Granules give the cytoplasm some texture.
  struct Granule {
    double y, x, amp;
  };
  std::vector<Granule> granules(12);
  for (auto& g : granules) {
    const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double r = cellR * std::sqrt(uniform01(rng));
    g = {cy + r * std::sin(a), cx + r * std::cos(a), uniform(rng, -0.25, 0.25)};
  }

  NdTensor raw({S, S, 2});
  const double co = std::cos(orient), si = std::sin(orient);
  std::size_t nucleusPixels = 0;
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double dy = y - cy, dx = x - cx;
      const double u = (dx * co + dy * si) * aspect;
      const double v = (-dx * si + dy * co) / aspect;
      const double cellMask = softStep((cellR - std::hypot(u, v)) / 1.2);
      double nucleus = 0.0;
      for (const auto& lobe : lobes) {
        nucleus = std::max(nucleus, softStep((lobe.r - std::hypot(y - lobe.y, x - lobe.x)) / 0.9));
      }
      if (nucleus > 0.5) ++nucleusPixels;
      double texture = 1.0;
      for (const auto& g : granules) {
        const double d2 = (y - g.y) * (y - g.y) + (x - g.x) * (x - g.x);
        texture += g.amp * std::exp(-d2 / 8.0);
      }
      const double cyto = cytoI * cellMask * (1.0 - 0.6 * nucleus) * texture;
      const double nuc = nucI * nucleus * (0.9 + 0.1 * texture);
      raw.at(y, x, 0) = std::max(0.0, cyto + config.backgroundLevel +
                                          config.noiseLevel * standardNormal(rng));
      raw.at(y, x, 1) = std::max(0.0, nuc + config.backgroundLevel +
                                          config.noiseLevel * standardNormal(rng));
    }
  }
  if (defect == Defect::SaturatedEdge) {
    const std::size_t row = uniformIndex(rng, 2) == 0 ? 0 : S - 1;
    for (std::size_t x = 0; x < S; ++x) raw.at(row, x, 0) = config.filter.saturationValue;
  }
  if (info) {
    info->nucleusPixels = nucleusPixels;
    info->defective = defect != Defect::None;
  }
  return raw;
}

SynthResult generateSyntheticSet(const SynthConfig& config) {
  config.validate();
  SynthResult result;
  for (CellClass label : {CellClass::Lymphocyte, CellClass::Neutrophil}) {
    const std::size_t wanted =
        label == CellClass::Lymphocyte ? config.lymphocyteCount : config.neutrophilCount;
    const char prefix = label == CellClass::Lymphocyte ? 'L' : 'N';
    std::size_t accepted = 0;
    for (std::uint64_t attempt = 0; accepted < wanted; ++attempt) {
      if (attempt > 4 * wanted + 100) throw Error("synthetic generator rejects too many captures");
      const std::uint64_t seed =
          splitmix(splitmix(config.seed) ^ (static_cast<std::uint64_t>(label) << 56) ^ attempt);
      char id[32];
      std::snprintf(id, sizeof id, "%c%06llu", prefix, static_cast<unsigned long long>(attempt));
      auto outcome = filterImage(renderRawCell(label, config, seed), config.filter);
      if (outcome.accepted()) {
        result.set.images.push_back({id, std::move(*outcome.pixels), label, Split::Unassigned});
        ++accepted;
      } else {
        result.rejections.push_back({id, label, *outcome.reason});
      }
    }
  }
  return result;
}

}  // namespace fscope
