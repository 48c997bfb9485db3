#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace regcast {

using json = nlohmann::json;

/// Versioned binary container of named tensors plus a JSON metadata block.
///
/// Layout (all integers little-endian):
///   8 bytes  magic "REGCAST\0"
///   u32      container version (kArchiveVersion)
///   u32      reserved (0)
///   u64      header length in bytes
///   header   UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "dtype",
///            "shape", "offset", "nbytes", "fnv1a"}]}
///   payload  tensor bytes, offsets relative to the payload start
///
/// Each tensor carries an FNV-1a 64-bit checksum of its bytes; a mismatch or a
/// truncated payload raises CorruptDataError on load.
class TensorArchive {
 public:
  static constexpr std::uint32_t kArchiveVersion = 1;

  TensorArchive() = default;
  explicit TensorArchive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  json& meta() { return meta_; }
  const json& meta() const { return meta_; }

  void add(const std::string& name, const torch::Tensor& tensor);
  void add_bytes(const std::string& name, const std::string& bytes);
  bool has(const std::string& name) const;
  const torch::Tensor& get(const std::string& name) const;
  std::string get_bytes(const std::string& name) const;
  const std::vector<std::pair<std::string, torch::Tensor>>& tensors() const { return tensors_; }

  /// Writes to a temporary sibling and renames, so readers never see a partial file.
  void save(const std::filesystem::path& path) const;
  /// Throws NotFoundError, CorruptDataError, or InvalidArgument on a kind mismatch
  /// (empty `expected_kind` accepts any kind).
  static TensorArchive load(const std::filesystem::path& path, const std::string& expected_kind = "");

 private:
  std::string kind_;
  json meta_ = json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors_;
};

std::uint64_t fnv1a64(const void* data, std::size_t n);

}  // namespace regcast
