#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "regcast/archive.hpp"

namespace regcast {

inline constexpr int kCheckpointVersion = 1;

/// Training metadata stored next to the weights.
struct CheckpointInfo {
  std::string fingerprint;
  json config = json::object();
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  json extra = json::object();
};

/// Additional modules and optimizers stored next to the main module, as
/// "<name>/param/<path>", "<name>/buffer/<path>" and bytes "optimizer/<name>".
/// Loaders of the main module ignore them.
struct CheckpointExtras {
  std::vector<std::pair<std::string, torch::nn::Module*>> modules;
  std::vector<std::pair<std::string, torch::optim::Optimizer*>> optimizers;
};

/// Writes a TensorArchive of kind `kind` holding every parameter as
/// "param/<path>", every buffer as "buffer/<path>", the optimizer state (when
/// given) as serialized bytes under "optimizer", and meta {"version",
/// "fingerprint", "config", "step", "seed", "extra"}.
void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const torch::nn::Module& module,
                     const CheckpointInfo& info, const torch::optim::Optimizer* optimizer = nullptr,
                     const CheckpointExtras& extras = {});

/// Reads the metadata of a checkpoint without touching any module.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path, const std::string& kind);

/// Loads parameters and buffers into `module` (and the extras, which must all
/// be present). Throws InvalidArgument when the
/// stored fingerprint differs from `expected_fingerprint`, or when a
/// parameter is missing or has a different shape. Loads the optimizer state
/// when `optimizer` is given and the checkpoint has one.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, const std::string& kind, torch::nn::Module& module,
                               const std::string& expected_fingerprint, torch::optim::Optimizer* optimizer = nullptr,
                               const CheckpointExtras& extras = {});

}  // namespace regcast
