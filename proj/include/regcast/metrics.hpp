#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regcast/dataset.hpp"
#include "regcast/grid.hpp"

namespace regcast {

/// cos(latitude) per grid row, broadcast over longitude. With `normalized`
/// the weights are divided by their mean.
struct LatWeights {
  torch::Tensor rows;  // [n_lat] double
  bool normalized = false;

  static LatWeights from_latitudes(const std::vector<double>& lats_deg, bool normalized = false);
  static LatWeights from_grid(const GridSpec& grid, bool normalized = false);
  int64_t n_lat() const { return rows.size(0); }
};

/// sqrt(1/N sum_i w_i (pred_i - obs_i)^2) over every element of [..., H, W]
/// fields; N counts all elements. Throws ShapeError on mismatched shapes and
/// NumericalError on non-finite input.
double weighted_rmse(const torch::Tensor& pred, const torch::Tensor& obs, const LatWeights& w);

enum class AccMode {
  /// Correlation of the climatology anomalies, each centered by its field mean.
  kAnomaly,
  /// The raw fields centered by their field means; climatology unused.
  kFieldMean,
};

/// Latitude-weighted centered correlation; std::nullopt when either centered
/// field has zero weighted variance. `clim` may be undefined in kFieldMean mode.
std::optional<double> weighted_acc(const torch::Tensor& pred, const torch::Tensor& obs, const torch::Tensor& clim,
                                   const LatWeights& w, AccMode mode = AccMode::kAnomaly);

/// 2x2 table for event = value >= threshold.
struct ContingencyCounts {
  std::int64_t hits = 0, false_alarms = 0, misses = 0, true_negatives = 0;
  double threshold = 0.0;

  std::int64_t total() const { return hits + false_alarms + misses + true_negatives; }
  ContingencyCounts& operator+=(const ContingencyCounts& o);
};

/// Throws InvalidArgument for a negative threshold or negative field values,
/// ShapeError for mismatched shapes.
ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& obs, double threshold);

/// hits / (hits + false alarms + misses); nullopt on a zero denominator.
std::optional<double> ts(const ContingencyCounts& c);
/// hits / (hits + misses).
std::optional<double> pod(const ContingencyCounts& c);
/// false alarms / (hits + false alarms).
std::optional<double> far(const ContingencyCounts& c);

inline const std::vector<double> kDefaultPrecipThresholds{0.1, 1.0, 5.0, 10.0};

/// One cell of a metric table. `value` is empty for undefined scores.
struct MetricRow {
  std::string variable;
  int lead_hours = 0;
  std::string metric;
  std::optional<double> value;
  std::int64_t n_samples = 0;
};

/// Delimited-text metric table with columns
/// variable,lead_hours,metric,value,n_samples; undefined values are written
/// as "undefined".
struct MetricTable {
  std::vector<MetricRow> rows;

  const MetricRow* find(const std::string& variable, int lead_hours, const std::string& metric) const;
  std::vector<std::string> variables() const;
  void write_csv(const std::filesystem::path& path) const;
  static MetricTable read_csv(const std::filesystem::path& path);
};

/// Metric name of a thresholded score, e.g. "ts@0.1".
std::string threshold_metric(const std::string& score, double threshold);

struct EvalOptions {
  /// Channel names; empty means every surface channel plus every 500 hPa channel.
  std::vector<std::string> variables;
  /// Leads to score; empty means every lead of each forecast.
  std::vector<int> leads;
  AccMode acc_mode = AccMode::kAnomaly;
  bool normalize_weights = false;
};

struct EvalResult {
  MetricTable table;
  /// Fraction of requested (forecast, lead) pairs whose valid time exists in
  /// both archives.
  double coverage = 1.0;
  std::vector<Timestamp> missing;
};

/// RMSE and ACC per (variable, lead), averaged over forecasts. Forecast
/// archives are datasets written by write_forecast (attributes init, leads).
/// Throws MissingTimestampError when nothing can be scored.
EvalResult evaluate_rollouts(const std::vector<const Dataset*>& forecasts, const Dataset& truth,
                             const Climatology* climatology, const EvalOptions& opt = {});
EvalResult evaluate_rollout(const Dataset& forecast, const Dataset& truth, const Climatology* climatology,
                            const EvalOptions& opt = {});

/// TS, POD and FAR per threshold from counts pooled over all (pred, obs) pairs.
MetricTable score_precipitation(const std::vector<torch::Tensor>& pred, const std::vector<torch::Tensor>& obs,
                                int lead_hours, const std::vector<double>& thresholds = kDefaultPrecipThresholds,
                                const std::string& variable = "tp");

}  // namespace regcast
