#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regcast/archive.hpp"
#include "regcast/grid.hpp"

namespace regcast {

void to_json(json& j, const GridSpec& g);
void from_json(const json& j, GridSpec& g);
void to_json(json& j, const VariableInventory& v);
void from_json(const json& j, VariableInventory& v);

/// NormStats are stored as JSON text:
///   {"format": "regcast-normstats", "version": 1, "years": [first, last],
///    "channels": [{"name", "mean", "std"}, ...]}
inline constexpr int kNormStatsVersion = 1;
void save_norm_stats(const NormStats& stats, const std::filesystem::path& path);
/// When `expected` is given, every expected channel must be present.
NormStats load_norm_stats(const std::filesystem::path& path,
                          const std::optional<std::vector<std::string>>& expected = std::nullopt);

/// Climatology is a TensorArchive of kind "climatology" with tensor "fields"
/// [12, 24, C, H, W] (f32) and meta {"version", "channels", "years"}.
inline constexpr int kClimatologyVersion = 1;
void save_climatology(const Climatology& clim, const std::filesystem::path& path);
Climatology load_climatology(const std::filesystem::path& path,
                             const std::optional<std::vector<std::string>>& expected = std::nullopt);

}  // namespace regcast
