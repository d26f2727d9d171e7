#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "featurescope/training.hpp"

namespace fscope {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'C', 'P'};

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
    }
  }
  void putDouble(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void putShape(const Shape& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) put<std::uint64_t>(d);
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double getDouble() { return std::bit_cast<double>(get<std::uint64_t>()); }
  Shape getShape() {
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw Error("checkpoint shape rank " + std::to_string(rank) + " is implausible");
    Shape s(rank);
    for (auto& d : s) d = get<std::uint64_t>();
    return s;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("checkpoint is truncated");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serializeCheckpoint(const Model& model) {
  model.validate();
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint8_t>(model.spec.poolCeil ? 1 : 0);
  w.putShape(model.spec.inputShape);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.spec.layers.size()));
  for (std::size_t l = 0; l < model.spec.layers.size(); ++l) {
    const auto& layer = model.spec.layers[l];
    w.put<std::uint8_t>(static_cast<std::uint8_t>(layer.kind));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(layer.padding));
    w.put<std::uint64_t>(layer.inChannels);
    w.put<std::uint64_t>(layer.outChannels);
    w.putDouble(layer.rate);
    w.putShape(model.params.perLayer[l].weights.shape());
    w.putShape(model.params.perLayer[l].bias.shape());
  }
  for (const auto& p : model.params.perLayer) {
    for (double v : p.weights.values()) w.putDouble(v);
    for (double v : p.bias.values()) w.putDouble(v);
  }
  return std::move(w.bytes);
}

Model deserializeCheckpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error("not a checkpoint file (bad magic)");
  }
  Reader r(bytes);
  for (int i = 0; i < 4; ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw Error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  Model model;
  model.spec.poolCeil = r.get<std::uint8_t>() != 0;
  model.spec.inputShape = r.getShape();
  const auto layerCount = r.get<std::uint32_t>();
  std::vector<std::pair<Shape, Shape>> shapes;
  for (std::uint32_t l = 0; l < layerCount; ++l) {
    LayerSpec layer;
    const auto kind = r.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(LayerKind::Dropout)) {
      throw Error("checkpoint layer " + std::to_string(l) + " has unknown kind " + std::to_string(kind));
    }
    layer.kind = static_cast<LayerKind>(kind);
    layer.padding = static_cast<Padding>(r.get<std::uint8_t>());
    layer.inChannels = r.get<std::uint64_t>();
    layer.outChannels = r.get<std::uint64_t>();
    layer.rate = r.getDouble();
    model.spec.layers.push_back(layer);
    Shape ws = r.getShape();
    Shape bs = r.getShape();
    shapes.emplace_back(std::move(ws), std::move(bs));
  }
  std::size_t total = 0;
  for (const auto& [ws, bs] : shapes) {
    total += (ws.empty() ? 0 : shapeProduct(ws)) + (bs.empty() ? 0 : shapeProduct(bs));
  }
  if (r.remaining() != 8 * total) {
    throw Error(r.remaining() < 8 * total ? "checkpoint is truncated"
                                          : "checkpoint has trailing bytes");
  }
  for (const auto& [ws, bs] : shapes) {
    LayerParams p;
    if (!ws.empty()) {
      p.weights = NdTensor(ws);
      for (double& v : p.weights.values()) v = r.getDouble();
    }
    if (!bs.empty()) {
      p.bias = NdTensor(bs);
      for (double& v : p.bias.values()) v = r.getDouble();
    }
    model.params.perLayer.push_back(std::move(p));
  }
  model.validate();
  return model;
}

void saveCheckpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serializeCheckpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Model loadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserializeCheckpoint(bytes);
}

}  // namespace fscope
