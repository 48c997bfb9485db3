#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>

#include "regcast/grid.hpp"
#include "regcast/metrics.hpp"

namespace regcast {

/// RMSE-vs-lead and ACC-vs-lead panels for one variable as an SVG file.
/// Undefined ACC values are skipped. Throws InvalidArgument when the table
/// holds no RMSE or ACC row for `variable`.
void plot_score_curves(const std::filesystem::path& path, const MetricTable& table, const std::string& variable);

/// Forecast, truth and forecast-minus-truth maps side by side as an SVG file.
/// Fields are [n_lat, n_lon] on `grid` with row 0 at the southern edge (drawn
/// at the bottom). The first two panels share one colour scale; the
/// difference uses a symmetric diverging scale.
void plot_field_panels(const std::filesystem::path& path, const torch::Tensor& forecast, const torch::Tensor& truth,
                       const GridSpec& grid, const std::string& title);

}  // namespace regcast
