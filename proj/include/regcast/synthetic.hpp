#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "regcast/dataset.hpp"

namespace regcast {

/// Knobs for the seeded synthetic weather generator.
struct SyntheticOptions {
  GridSpec grid = GridSpec::toy(32, 32);
  VariableInventory inventory = VariableInventory::toy();
  std::vector<TimeRun> runs;
  std::uint64_t seed = 0;
  int chunk_hours = 24;
  bool with_precip = true;
  /// High-resolution precipitation covers the rows at or above crop_lat,
  /// refined by hires_refine, generated at raw_factor times that resolution and
  /// block-averaged down (mirrors the raw -> stored downsampling of real
  /// high-resolution analyses).
  double crop_lat = 28.0;
  int hires_refine = 2;
  int raw_factor = 5;
  /// Translation speed of the advected patterns, degrees per hour.
  double drift_deg_per_hour = 0.25;
};

/// `n_hours` contiguous hours starting at 2019-07-01T00.
SyntheticOptions synthetic_contiguous(const GridSpec& grid, const VariableInventory& inv, int n_hours,
                                      std::uint64_t seed);

/// Calendar layout used by the desk profile: one `hours_per_run` run on the
/// 15th of every month of `train_year` (covers every (month, hour) key), plus
/// one run starting July 1st of the validation and test years.
std::vector<TimeRun> calendar_runs(int hours_per_run, const SplitRule& split = {});

/// Hires grid implied by the options (crop + refinement of the base grid).
GridSpec synthetic_hires_grid(const SyntheticOptions& opt);

/// Smooth, spatially correlated fields: sums of low-wavenumber Fourier modes
/// drifting slowly in time, mixed across channels, on top of per-variable
/// climatological baselines with seasonal and diurnal cycles. Precipitation is
/// a thresholded, long-tailed function of a moisture-like driver field.
/// Identical options produce identical datasets.
DatasetManifest generate_synthetic(const std::filesystem::path& root, const SyntheticOptions& opt,
                                   bool force = false);

/// Physical-unit state [C, H, W] at time t (no I/O); used by the writer and tests.
class SyntheticWeather {
 public:
  explicit SyntheticWeather(const SyntheticOptions& opt);

  torch::Tensor state(Timestamp t) const;
  torch::Tensor topography() const;
  /// Coarse precipitation on the base grid, mm/h.
  torch::Tensor precip(Timestamp t) const;
  /// High-resolution precipitation on synthetic_hires_grid(), mm/h.
  torch::Tensor hires_precip(Timestamp t) const;

 private:
  struct Mode {
    torch::Tensor kx, ky, amp, phase, omega;  // [K]
    double u = 0.0, v = 0.0;                  // deg/h
  };
  torch::Tensor eval_mode(const Mode& m, const torch::Tensor& lat, const torch::Tensor& lon,
                          double hours) const;
  torch::Tensor driver(const torch::Tensor& lat, const torch::Tensor& lon, double hours) const;
  static torch::Tensor rate_from_driver(const torch::Tensor& d);

  SyntheticOptions opt_;
  GridSpec hires_;
  std::vector<Mode> modes_;
  Mode detail_;
  Mode terrain_;
  torch::Tensor mixing_;  // [C, M]
  torch::Tensor lat_, lon_;
};

/// Rows of `values` ([..., H, W] on `from`) restricted to the latitudes of
/// `to`, which must be an aligned row-subset of `from` with equal longitudes.
torch::Tensor crop_to_grid(const torch::Tensor& values, const GridSpec& from, const GridSpec& to);

}  // namespace regcast
