#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "featurescope/image_io.hpp"
#include "featurescope/tensor.hpp"

namespace fscope {

// Tensor file: "FSTN", u16 version, u16 rank, u64 extent per axis, then
// little-endian float64 values in row-major order.
inline constexpr std::uint16_t kTensorFileVersion = 1;
inline constexpr int kBundleVersion = 1;
inline constexpr const char* kBundleFormat = "featurescope-bundle";

std::vector<std::uint8_t> serializeTensor(const NdTensor& tensor);
NdTensor deserializeTensor(const std::vector<std::uint8_t>& bytes);

std::string sha256Hex(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> readFileBytes(const std::filesystem::path& path);

/// Bundle content that is missing or was written by an unsupported version.
class BundleError : public Error {
 public:
  BundleError(std::string code, const std::string& detail) : Error(detail), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

struct FileEntry {
  std::string sha256;
  std::uint64_t bytes = 0;
};

/// Directory of hashed artifacts described by manifest.json. Writes go to a
/// staging directory and are moved into place by commit(), followed by the
/// manifest itself.
class Bundle {
 public:
  /// Opens an existing bundle, or creates an empty one when `create` is set.
  /// Throws BundleError on a version or format mismatch.
  static Bundle open(const std::filesystem::path& root, bool create = false);

  const std::filesystem::path& root() const { return root_; }
  const nlohmann::json& manifest() const { return manifest_; }
  const std::map<std::string, FileEntry>& files() const { return files_; }

  bool has(const std::string& rel) const { return files_.count(rel) != 0; }
  /// Throws BundleError("missing-prerequisite") naming `stage` when absent.
  void require(const std::string& rel, const std::string& stage) const;
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }

  void writeBytes(const std::string& rel, const std::vector<std::uint8_t>& bytes);
  void writeJson(const std::string& rel, const nlohmann::json& value);
  void writeTensor(const std::string& rel, const NdTensor& tensor);
  void writePng(const std::string& rel, const io::Rgb8Image& image);
  /// Stages a whole directory tree, e.g. one written by another module.
  void stageDirectory(const std::string& relDir, const std::filesystem::path& source);
  /// Files staged under `relDir` are dropped from the manifest unless
  /// rewritten in this transaction.
  void replaceDirectory(const std::string& relDir);

  nlohmann::json readJson(const std::string& rel) const;
  NdTensor readTensor(const std::string& rel) const;

  void setConfig(const std::string& stage, const nlohmann::json& config);
  void setValue(const std::string& key, const nlohmann::json& value);

  /// Moves staged files into place and rewrites the manifest.
  void commit();
  /// Drops everything staged since the last commit.
  void rollback();

  /// Relative paths whose content no longer matches the manifest.
  std::vector<std::string> verify() const;

 private:
  explicit Bundle(std::filesystem::path root) : root_(std::move(root)) {}
  std::filesystem::path stagingPath(const std::string& rel);
  void writeManifest();

  std::filesystem::path root_;
  nlohmann::json manifest_;
  std::map<std::string, FileEntry> files_;
  std::vector<std::string> staged_;
  std::vector<std::string> replacedDirs_;
};

}  // namespace fscope
