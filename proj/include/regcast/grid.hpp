#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "regcast/timestamp.hpp"

namespace regcast {

/// Equiangular latitude/longitude grid. Row i sits at lat_start + i*resolution,
/// column j at lon_start + j*resolution; row 0 is the first row in memory.
struct GridSpec {
  double lat_start = 0.0;
  double lat_end = 60.0;
  double lon_start = 70.0;
  double lon_end = 140.0;
  double resolution = 0.25;
  int n_lat = 241;
  int n_lon = 281;

  /// Derives n_lat/n_lon as round(extent/resolution) + 1.
  static GridSpec from_extent(double lat_start, double lat_end, double lon_start, double lon_end,
                              double resolution);
  /// 0-60N, 70-140E at 0.25 degrees: 241 x 281.
  static GridSpec full_scale();
  /// Small grid for tests and desk runs; n_lat, n_lon >= 12.
  static GridSpec toy(int n_lat, int n_lon, double resolution = 1.0, double lat_start = 20.0,
                      double lon_start = 100.0);

  double latitude(int row) const { return lat_start + row * resolution; }
  double longitude(int col) const { return lon_start + col * resolution; }
  std::vector<double> latitudes() const;

  /// Keeps the rows whose latitude is >= lat_min.
  GridSpec crop_lat(double lat_min) const;
  int first_row_at_or_above(double lat_min) const;

  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

/// Ordered variable list. Channels are laid out surface block first, then the
/// pressure variables level-major: for each level (in listed order), every
/// pressure variable in listed order. Pressure channels are named var+level,
/// e.g. "z500".
struct VariableInventory {
  std::vector<std::string> surface_vars{"2mt", "u10", "v10", "mslp"};
  std::vector<std::string> pressure_vars{"z", "t", "u", "v", "q"};
  std::vector<int> pressure_levels{100, 150, 200, 250, 300, 400, 450, 500, 600, 700, 850, 950, 1000};

  static VariableInventory full_scale() { return {}; }
  /// 4 surface + {z, t} x {500, 850}: 8 channels.
  static VariableInventory toy();

  int n_surface() const { return int(surface_vars.size()); }
  int n_pressure_vars() const { return int(pressure_vars.size()); }
  int n_levels() const { return int(pressure_levels.size()); }
  int channels() const { return n_surface() + n_pressure_vars() * n_levels(); }

  std::vector<std::string> channel_names() const;
  /// Index of a channel by name ("2mt", "z500"); throws if unknown.
  int channel_index(std::string_view name) const;
  int pressure_channel(int var, int level) const {
    return n_surface() + level * n_pressure_vars() + var;
  }

  void validate() const;
  bool operator==(const VariableInventory&) const = default;
};

/// All channels of one time slice, [channels, n_lat, n_lon].
struct WeatherState {
  torch::Tensor values;
  Timestamp time;
  bool normalized = false;

  int channels() const { return int(values.size(0)); }
  /// Throws ShapeError / NumericalError when the state breaks its invariants.
  void validate(const GridSpec& grid, const VariableInventory& inv) const;
};

/// Lateral frame of a state, [channels, width, perimeter] with the perimeter
/// axis laid out as [first rows | last rows | first columns | last columns].
/// Row strips run along longitude (n_lon long), column strips along latitude
/// (n_lat long). Index 0 of the width axis is always the outermost pixel, so
/// the last-row and last-column strips are stored edge-first. Corner pixels
/// appear once in a row strip and once in a column strip.
struct BoundaryStrip {
  torch::Tensor values;
  int width = 4;
  int n_lat = 0;
  int n_lon = 0;
  Timestamp time;

  int perimeter() const { return 2 * n_lon + 2 * n_lat; }
};

/// Per-channel z-score statistics keyed by channel name.
struct NormStats {
  std::vector<std::string> names;
  std::vector<double> mean;
  std::vector<double> std;
  int first_year = 0;
  int last_year = 0;

  int size() const { return int(names.size()); }
  int index_of(std::string_view name) const;  // -1 when absent
  /// Sub-table in the order of `wanted`; throws when a name is missing.
  NormStats select(const std::vector<std::string>& wanted) const;
  double mean_of(std::string_view name) const;
  double std_of(std::string_view name) const;
  void validate() const;
};

/// Mean fields keyed by (month, hour of day): [12, 24, channels, n_lat, n_lon].
struct Climatology {
  torch::Tensor fields;
  std::vector<std::string> names;
  int first_year = 0;
  int last_year = 0;

  /// [channels, n_lat, n_lon] for the key of `t`.
  torch::Tensor at(Timestamp t) const;
  /// [n_lat, n_lon] for one named channel.
  torch::Tensor at(Timestamp t, std::string_view name) const;
  int index_of(std::string_view name) const;
};

// ---------------------------------------------------------------------------
// Value transforms

BoundaryStrip extract_boundary(const WeatherState& state, int width = 4);
/// Same as above on a raw [..., C, H, W] tensor; returns [..., C, width, perimeter].
torch::Tensor extract_boundary(const torch::Tensor& values, int width);

WeatherState normalize(const WeatherState& state, const NormStats& stats);
WeatherState denormalize(const WeatherState& state, const NormStats& stats);
/// Per-channel (x - mean) / std over dim `channel_dim` of an arbitrary tensor.
torch::Tensor normalize_channels(const torch::Tensor& x, const NormStats& stats, int64_t channel_dim);
torch::Tensor denormalize_channels(const torch::Tensor& x, const NormStats& stats, int64_t channel_dim);

/// Marshall-Palmer Z = 200 R^1.6, dBZ = 10 log10 Z, with rates below 0.01 mm/h
/// clamped to the 0.01 mm/h image.
inline constexpr double kMinRainRate = 0.01;
double dbz_floor();
double precip_to_dbz(double rate_mm_h);
/// Inverse of precip_to_dbz; values below the floor decode to 0 (dry).
double dbz_to_precip(double dbz);
torch::Tensor precip_to_dbz(const torch::Tensor& rate);
torch::Tensor dbz_to_precip(const torch::Tensor& dbz);

/// Non-overlapping factor x factor block means over the last two dims.
torch::Tensor avgpool_downsample(const torch::Tensor& field, int factor);

/// Rows [first_row, n_lat) of a [..., H, W] tensor.
torch::Tensor crop_rows(const torch::Tensor& field, int first_row);

/// Streaming accumulation of (month, hour) means.
class ClimatologyBuilder {
 public:
  ClimatologyBuilder(std::vector<std::string> names, int n_lat, int n_lon);
  /// `values` is [channels, n_lat, n_lon] in physical units.
  void add(Timestamp t, const torch::Tensor& values);
  /// Throws InvalidArgument naming the first missing (month, hour) key.
  Climatology finish(int first_year, int last_year) const;

 private:
  std::vector<std::string> names_;
  torch::Tensor sums_;  // [12, 24, C, H, W] double
  std::array<std::int64_t, 12 * 24> counts_{};
};

}  // namespace regcast
