#include "featurescope/bundle.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace fscope {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kTensorMagic[4] = {'F', 'S', 'T', 'N'};
constexpr const char* kStagingDir = ".staging";

template <typename T>
void putLe(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T getLe(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error("tensor file truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
  pos += sizeof(T);
  return v;
}

void writeFileAtomic(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

bool under(const std::string& rel, const std::string& dir) {
  return rel.size() > dir.size() && rel.compare(0, dir.size(), dir) == 0 && rel[dir.size()] == '/';
}

}  // namespace

std::vector<std::uint8_t> serializeTensor(const NdTensor& tensor) {
  std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
  putLe<std::uint16_t>(out, kTensorFileVersion);
  putLe<std::uint16_t>(out, static_cast<std::uint16_t>(tensor.rank()));
  for (auto d : tensor.shape()) putLe<std::uint64_t>(out, d);
  out.reserve(out.size() + 8 * tensor.size());
  for (double v : tensor.values()) putLe<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

NdTensor deserializeTensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0) throw Error("not a tensor file");
  std::size_t pos = 4;
  const auto version = getLe<std::uint16_t>(bytes, pos);
  if (version != kTensorFileVersion) {
    throw Error("tensor file version " + std::to_string(version) + " is not supported");
  }
  const auto rank = getLe<std::uint16_t>(bytes, pos);
  Shape shape(rank);
  for (auto& d : shape) d = getLe<std::uint64_t>(bytes, pos);
  const std::size_t n = shapeProduct(shape);
  if (bytes.size() - pos != 8 * n) throw Error("tensor file holds the wrong number of values for " + shapeToString(shape));
  std::vector<double> values(n);
  for (auto& v : values) v = std::bit_cast<double>(getLe<std::uint64_t>(bytes, pos));
  return NdTensor(std::move(shape), std::move(values));
}

std::string sha256Hex(const std::vector<std::uint8_t>& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::vector<std::uint8_t> readFileBytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

Bundle Bundle::open(const fs::path& root, bool create) {
  Bundle b(root);
  const fs::path manifestPath = root / "manifest.json";
  if (!fs::exists(manifestPath)) {
    if (!create) throw BundleError("missing-bundle", "no bundle manifest at " + manifestPath.string());
    fs::create_directories(root);
    b.manifest_ = {{"format", kBundleFormat}, {"version", kBundleVersion}, {"config", json::object()}};
    b.writeManifest();
    return b;
  }
  std::ifstream in(manifestPath);
  try {
    b.manifest_ = json::parse(in);
  } catch (const json::exception& e) {
    throw BundleError("bad-manifest", std::string("unreadable bundle manifest: ") + e.what());
  }
  if (b.manifest_.value("format", "") != kBundleFormat) {
    throw BundleError("bad-manifest", root.string() + " is not a featurescope bundle");
  }
  const int version = b.manifest_.value("version", -1);
  if (version != kBundleVersion) {
    throw BundleError("version-mismatch", "bundle version " + std::to_string(version) + " is not supported (expected " +
                                              std::to_string(kBundleVersion) + ")");
  }
  const json listed = b.manifest_.value("files", json::object());
  for (const auto& [rel, entry] : listed.items()) {
    b.files_[rel] = {entry.at("sha256").get<std::string>(), entry.at("bytes").get<std::uint64_t>()};
  }
  // Leftovers of an interrupted command never reached the manifest.
  fs::remove_all(root / kStagingDir);
  return b;
}

void Bundle::require(const std::string& rel, const std::string& stage) const {
  if (!has(rel)) throw BundleError("missing-prerequisite", "bundle has no " + rel + "; run '" + stage + "' first");
}

fs::path Bundle::stagingPath(const std::string& rel) {
  if (rel.empty() || rel.front() == '/' || rel.find("..") != std::string::npos || rel == "manifest.json") {
    throw Error("invalid bundle path '" + rel + "'");
  }
  const fs::path p = root_ / kStagingDir / rel;
  fs::create_directories(p.parent_path());
  if (std::find(staged_.begin(), staged_.end(), rel) == staged_.end()) staged_.push_back(rel);
  return p;
}

void Bundle::writeBytes(const std::string& rel, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(stagingPath(rel), std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot stage " + rel);
}

void Bundle::writeJson(const std::string& rel, const json& value) {
  const std::string text = value.dump(1) + "\n";
  writeBytes(rel, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void Bundle::writeTensor(const std::string& rel, const NdTensor& tensor) { writeBytes(rel, serializeTensor(tensor)); }

void Bundle::writePng(const std::string& rel, const io::Rgb8Image& image) { io::writePng(stagingPath(rel), image); }

void Bundle::stageDirectory(const std::string& relDir, const fs::path& source) {
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(source)) {
    if (e.is_regular_file()) paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    const std::string rel = relDir + "/" + fs::relative(p, source).generic_string();
    fs::copy_file(p, stagingPath(rel), fs::copy_options::overwrite_existing);
  }
}

void Bundle::replaceDirectory(const std::string& relDir) { replacedDirs_.push_back(relDir); }

json Bundle::readJson(const std::string& rel) const {
  std::ifstream in(path(rel));
  if (!in) throw BundleError("missing-file", "cannot read " + rel);
  return json::parse(in);
}

NdTensor Bundle::readTensor(const std::string& rel) const { return deserializeTensor(readFileBytes(path(rel))); }

void Bundle::setConfig(const std::string& stage, const json& config) { manifest_["config"][stage] = config; }

void Bundle::setValue(const std::string& key, const json& value) { manifest_[key] = value; }

void Bundle::commit() {
  for (const auto& dir : replacedDirs_) {
    for (auto it = files_.begin(); it != files_.end();) {
      if (under(it->first, dir) && std::find(staged_.begin(), staged_.end(), it->first) == staged_.end()) {
        fs::remove(root_ / it->first);
        it = files_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (const auto& rel : staged_) {
    const fs::path from = root_ / kStagingDir / rel, to = root_ / rel;
    const auto bytes = readFileBytes(from);
    fs::create_directories(to.parent_path());
    fs::rename(from, to);
    files_[rel] = {sha256Hex(bytes), bytes.size()};
  }
  staged_.clear();
  replacedDirs_.clear();
  fs::remove_all(root_ / kStagingDir);
  writeManifest();
}

void Bundle::rollback() {
  staged_.clear();
  replacedDirs_.clear();
  fs::remove_all(root_ / kStagingDir);
}

void Bundle::writeManifest() {
  json files = json::object();
  for (const auto& [rel, e] : files_) files[rel] = {{"sha256", e.sha256}, {"bytes", e.bytes}};
  manifest_["files"] = files;
  writeFileAtomic(root_ / "manifest.json", manifest_.dump(1) + "\n");
}

std::vector<std::string> Bundle::verify() const {
  std::vector<std::string> bad;
  for (const auto& [rel, e] : files_) {
    const fs::path p = root_ / rel;
    if (!fs::exists(p) || sha256Hex(readFileBytes(p)) != e.sha256) bad.push_back(rel);
  }
  return bad;
}

}  // namespace fscope
