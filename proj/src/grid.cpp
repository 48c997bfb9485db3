#include "regcast/grid.hpp"

#include <cmath>

#include "regcast/error.hpp"

namespace regcast {

// ---------------------------------------------------------------------------
// GridSpec

GridSpec GridSpec::from_extent(double lat_start, double lat_end, double lon_start,
                               double lon_end, double resolution) {
  if (!(resolution > 0.0)) throw InvalidArgument("grid resolution must be positive");
  GridSpec g;
  g.lat_start = lat_start;
  g.lat_end = lat_end;
  g.lon_start = lon_start;
  g.lon_end = lon_end;
  g.resolution = resolution;
  g.n_lat = int(std::lround((lat_end - lat_start) / resolution)) + 1;
  g.n_lon = int(std::lround((lon_end - lon_start) / resolution)) + 1;
  g.validate();
  return g;
}

GridSpec GridSpec::full_scale() { return from_extent(0.0, 60.0, 70.0, 140.0, 0.25); }

GridSpec GridSpec::toy(int n_lat, int n_lon, double resolution, double lat_start,
                       double lon_start) {
  if (n_lat < 12 || n_lon < 12) throw InvalidArgument("toy grids need n_lat, n_lon >= 12");
  return from_extent(lat_start, lat_start + (n_lat - 1) * resolution, lon_start,
                     lon_start + (n_lon - 1) * resolution, resolution);
}

std::vector<double> GridSpec::latitudes() const {
  std::vector<double> out(n_lat);
  for (int i = 0; i < n_lat; ++i) out[i] = latitude(i);
  return out;
}

int GridSpec::first_row_at_or_above(double lat_min) const {
  for (int i = 0; i < n_lat; ++i) {
    if (latitude(i) >= lat_min - 1e-9) return i;
  }
  throw InvalidArgument("no grid row at or above latitude " + std::to_string(lat_min));
}

GridSpec GridSpec::crop_lat(double lat_min) const {
  int first = first_row_at_or_above(lat_min);
  GridSpec g = *this;
  g.lat_start = latitude(first);
  g.n_lat = n_lat - first;
  return g;
}

void GridSpec::validate() const {
  if (!(resolution > 0.0)) throw InvalidArgument("grid resolution must be positive");
  if (n_lat < 1 || n_lon < 1) throw InvalidArgument("grid must have at least one cell");
  auto expect_lat = int(std::lround((lat_end - lat_start) / resolution)) + 1;
  auto expect_lon = int(std::lround((lon_end - lon_start) / resolution)) + 1;
  if (expect_lat != n_lat || expect_lon != n_lon) {
    throw InvalidArgument("grid counts disagree with extent/resolution");
  }
  if (lat_start < -90.0 || lat_end > 90.0) throw InvalidArgument("latitudes out of range");
}

// ---------------------------------------------------------------------------
// VariableInventory

VariableInventory VariableInventory::toy() {
  VariableInventory inv;
  inv.pressure_vars = {"z", "t"};
  inv.pressure_levels = {500, 850};
  return inv;
}

std::vector<std::string> VariableInventory::channel_names() const {
  std::vector<std::string> out(surface_vars);
  for (int level : pressure_levels) {
    for (const auto& v : pressure_vars) out.push_back(v + std::to_string(level));
  }
  return out;
}

int VariableInventory::channel_index(std::string_view name) const {
  auto names = channel_names();
  for (int i = 0; i < int(names.size()); ++i) {
    if (names[i] == name) return i;
  }
  throw InvalidArgument("unknown variable '" + std::string(name) + "'");
}

void VariableInventory::validate() const {
  if (surface_vars.empty()) throw InvalidArgument("inventory needs at least one surface variable");
  if (!pressure_vars.empty() && pressure_levels.empty()) {
    throw InvalidArgument("pressure variables given without pressure levels");
  }
  auto names = channel_names();
  for (size_t i = 0; i < names.size(); ++i) {
    for (size_t j = i + 1; j < names.size(); ++j) {
      if (names[i] == names[j]) throw InvalidArgument("duplicate channel name " + names[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// WeatherState

void WeatherState::validate(const GridSpec& grid, const VariableInventory& inv) const {
  if (!values.defined() || values.dim() != 3) throw ShapeError("state must be [C, H, W]");
  if (values.size(0) != inv.channels() || values.size(1) != grid.n_lat ||
      values.size(2) != grid.n_lon) {
    throw ShapeError("state shape " + std::to_string(values.size(0)) + "x" +
                     std::to_string(values.size(1)) + "x" + std::to_string(values.size(2)) +
                     " does not match grid/inventory " + std::to_string(inv.channels()) + "x" +
                     std::to_string(grid.n_lat) + "x" + std::to_string(grid.n_lon));
  }
  if (!torch::isfinite(values).all().item<bool>()) {
    throw NumericalError("state at " + time.iso() + " contains NaN/Inf");
  }
}

// ---------------------------------------------------------------------------
// NormStats

int NormStats::index_of(std::string_view name) const {
  for (int i = 0; i < size(); ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

NormStats NormStats::select(const std::vector<std::string>& wanted) const {
  NormStats out;
  out.first_year = first_year;
  out.last_year = last_year;
  for (const auto& w : wanted) {
    int i = index_of(w);
    if (i < 0) throw InvalidArgument("normalization stats have no channel '" + w + "'");
    out.names.push_back(w);
    out.mean.push_back(mean[i]);
    out.std.push_back(std[i]);
  }
  return out;
}

double NormStats::mean_of(std::string_view name) const {
  int i = index_of(name);
  if (i < 0) throw InvalidArgument("normalization stats have no channel '" + std::string(name) + "'");
  return mean[i];
}

double NormStats::std_of(std::string_view name) const {
  int i = index_of(name);
  if (i < 0) throw InvalidArgument("normalization stats have no channel '" + std::string(name) + "'");
  return std[i];
}

void NormStats::validate() const {
  if (mean.size() != names.size() || std.size() != names.size()) {
    throw InvalidArgument("normalization stats arrays disagree in length");
  }
  for (int i = 0; i < size(); ++i) {
    if (!std::isfinite(mean[i]) || !std::isfinite(std[i]) || !(std[i] > 0.0)) {
      throw InvalidArgument("channel '" + names[i] + "' has non-positive or non-finite std");
    }
  }
}

// ---------------------------------------------------------------------------
// Climatology

int Climatology::index_of(std::string_view name) const {
  for (int i = 0; i < int(names.size()); ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

torch::Tensor Climatology::at(Timestamp t) const {
  return fields[int64_t(t.month()) - 1][int64_t(t.hour_of_day())];
}

torch::Tensor Climatology::at(Timestamp t, std::string_view name) const {
  int c = index_of(name);
  if (c < 0) throw InvalidArgument("climatology has no channel '" + std::string(name) + "'");
  return at(t)[c];
}

}  // namespace regcast
