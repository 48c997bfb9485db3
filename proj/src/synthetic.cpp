#include "regcast/synthetic.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numbers>

#include "regcast/error.hpp"

namespace regcast {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kModes = 6;
constexpr int kWaves = 12;

struct VarProfile {
  double amp = 1.0;
  double seasonal = 0.0;
  double diurnal = 0.0;
  bool log_positive = false;
};

double std_height_km(double hpa) { return 44.33 * (1.0 - std::pow(hpa / 1013.25, 0.19026)); }

/// Climatological baseline [H, W] for one channel plus its variability profile.
std::pair<torch::Tensor, VarProfile> baseline(const std::string& var, int level,
                                              const torch::Tensor& lat2d) {
  auto dlat = lat2d - 30.0;
  auto ones = torch::ones_like(lat2d);
  if (var == "2mt") return {300.0 - 0.6 * dlat, {3.0, 8.0, 4.0}};
  if (var == "u10") return {1.0 * ones, {4.0, 1.0, 0.5}};
  if (var == "v10") return {0.0 * ones, {4.0, 1.0, 0.5}};
  if (var == "mslp") return {101300.0 - 15.0 * dlat, {600.0, 300.0, 80.0}};
  double h = std_height_km(level);
  if (var == "z") return {9.80665 * 1000.0 * h - 60.0 * dlat, {400.0, 200.0, 10.0}};
  if (var == "t") return {std::max(216.65, 288.15 - 6.5 * h) - 0.4 * dlat, {3.0, 5.0, 1.0}};
  if (var == "u") return {5.0 + 15.0 * (1.0 - level / 1000.0) + 0.2 * dlat, {6.0, 3.0, 0.5}};
  if (var == "v") return {0.0 * ones, {5.0, 1.0, 0.5}};
  if (var == "q") {
    return {0.012 * std::pow(level / 1000.0, 3.0) * torch::exp(-dlat.clamp_min(-15.0) / 40.0),
            {0.3, 0.2, 0.05, true}};
  }
  return {0.0 * ones, {1.0, 0.0, 0.0}};
}

torch::Tensor uniform(at::Generator& gen, int64_t n, double lo, double hi) {
  return torch::rand({n}, gen, torch::kDouble) * (hi - lo) + lo;
}

}  // namespace

SyntheticOptions synthetic_contiguous(const GridSpec& grid, const VariableInventory& inv, int n_hours,
                                      std::uint64_t seed) {
  if (n_hours < 1) throw InvalidArgument("synthetic dataset needs n_hours >= 1");
  SyntheticOptions opt;
  opt.grid = grid;
  opt.inventory = inv;
  opt.seed = seed;
  opt.runs = {{Timestamp::from_ymdh(2019, 7, 1, 0), n_hours}};
  opt.crop_lat = grid.latitude(grid.n_lat / 4);
  return opt;
}

std::vector<TimeRun> calendar_runs(int hours_per_run, const SplitRule& split) {
  if (hours_per_run < 1) throw InvalidArgument("calendar runs need hours_per_run >= 1");
  std::vector<TimeRun> runs;
  for (unsigned m = 1; m <= 12; ++m) {
    runs.push_back({Timestamp::from_ymdh(split.train_end_year, m, 15, 0), hours_per_run});
  }
  runs.push_back({Timestamp::from_ymdh(split.val_year, 7, 1, 0), hours_per_run});
  runs.push_back({Timestamp::from_ymdh(split.test_year, 7, 1, 0), hours_per_run});
  return runs;
}

GridSpec synthetic_hires_grid(const SyntheticOptions& opt) {
  if (opt.hires_refine < 1 || opt.raw_factor < 1) throw InvalidArgument("refinement factors must be >= 1");
  auto crop = opt.grid.crop_lat(opt.crop_lat);
  double res = opt.grid.resolution / opt.hires_refine;
  double lat0 = crop.lat_start - opt.grid.resolution / 2 + res / 2;
  double lon0 = crop.lon_start - opt.grid.resolution / 2 + res / 2;
  int n_lat = crop.n_lat * opt.hires_refine;
  int n_lon = crop.n_lon * opt.hires_refine;
  return GridSpec::from_extent(lat0, lat0 + (n_lat - 1) * res, lon0, lon0 + (n_lon - 1) * res, res);
}

SyntheticWeather::SyntheticWeather(const SyntheticOptions& opt) : opt_(opt) {
  opt_.grid.validate();
  opt_.inventory.validate();
  hires_ = synthetic_hires_grid(opt_);
  auto gen = at::detail::createCPUGenerator(opt_.seed);

  auto make_mode = [&](double min_wl, double max_wl, double speed) {
    Mode m;
    auto wl = uniform(gen, kWaves, min_wl, max_wl);
    auto dir = uniform(gen, kWaves, 0.0, 2 * kPi);
    auto k = 2 * kPi / wl;
    m.kx = k * torch::cos(dir);
    m.ky = k * torch::sin(dir);
    auto a = torch::sqrt(wl);  // red spectrum: long waves carry more variance
    m.amp = a * std::sqrt(2.0) / torch::sqrt((a * a).sum());
    m.phase = uniform(gen, kWaves, 0.0, 2 * kPi);
    m.omega = torch::randn({kWaves}, gen, torch::kDouble) * (2 * kPi / 240.0);
    auto heading = uniform(gen, 1, -kPi / 3, kPi / 3).item<double>();  // mostly eastward
    m.u = speed * std::cos(heading);
    m.v = speed * std::sin(heading);
    return m;
  };
  double extent = std::max(opt_.grid.lat_end - opt_.grid.lat_start, opt_.grid.lon_end - opt_.grid.lon_start);
  double max_wl = std::max(12.0 * opt_.grid.resolution, extent);
  double min_wl = std::max(6.0 * opt_.grid.resolution, max_wl / 5.0);
  for (int i = 0; i < kModes; ++i) modes_.push_back(make_mode(min_wl, max_wl, opt_.drift_deg_per_hour));
  detail_ = make_mode(2.5 * hires_.resolution * opt_.hires_refine, 5.0 * opt_.grid.resolution,
                      opt_.drift_deg_per_hour);
  terrain_ = make_mode(min_wl / 2, max_wl, 0.0);
  terrain_.omega.zero_();

  auto mix = torch::randn({opt_.inventory.channels(), kModes}, gen, torch::kDouble);
  mixing_ = mix / mix.norm(2, 1, true);
  lat_ = torch::tensor(opt_.grid.latitudes(), torch::kDouble);
  std::vector<double> lons(opt_.grid.n_lon);
  for (int j = 0; j < opt_.grid.n_lon; ++j) lons[j] = opt_.grid.longitude(j);
  lon_ = torch::tensor(lons, torch::kDouble);
}

torch::Tensor SyntheticWeather::eval_mode(const Mode& m, const torch::Tensor& lat,
                                          const torch::Tensor& lon, double hours) const {
  // phase_k(y, x) = kx (x - u t) + ky (y - v t) + omega t + phi
  auto kx = m.kx.view({-1, 1, 1});
  auto ky = m.ky.view({-1, 1, 1});
  auto shift = (m.kx * m.u + m.ky * m.v) * hours;
  auto c = (m.phase + m.omega * hours - shift).view({-1, 1, 1});
  auto arg = kx * lon.view({1, 1, -1}) + ky * lat.view({1, -1, 1}) + c;
  return (m.amp.view({-1, 1, 1}) * torch::cos(arg)).sum(0);
}

torch::Tensor SyntheticWeather::state(Timestamp t) const {
  // Time relative to 2000-01-01 keeps phases small.
  double hours = double(t.hours() - 262968);
  std::vector<torch::Tensor> fields;
  for (const auto& m : modes_) fields.push_back(eval_mode(m, lat_, lon_, hours));
  auto f = torch::stack(fields);                                   // [M, H, W]
  auto mixed = torch::einsum("cm,mhw->chw", {mixing_, f});         // [C, H, W], ~unit variance
  auto lat2d = lat_.view({-1, 1}).expand({opt_.grid.n_lat, opt_.grid.n_lon});
  auto lon2d = lon_.view({1, -1}).expand({opt_.grid.n_lat, opt_.grid.n_lon});

  double doy = double(t - Timestamp::from_ymdh(t.year(), 1, 1, 0)) / 24.0;
  double season = std::cos(2 * kPi * (doy - 196.0) / 365.25);  // warm peak mid-July
  auto local_hour = (double(t.hour_of_day()) + lon2d / 15.0);
  auto diurnal = torch::cos(2 * kPi * (local_hour - 15.0) / 24.0);

  const auto& inv = opt_.inventory;
  std::vector<torch::Tensor> channels;
  auto add_channel = [&](const std::string& var, int level, int c) {
    auto [base, prof] = baseline(var, level, lat2d);
    if (prof.log_positive) {
      channels.push_back(base * torch::exp(prof.amp * mixed[c] + prof.seasonal * season +
                                           prof.diurnal * diurnal));
    } else {
      channels.push_back(base + prof.amp * mixed[c] + prof.seasonal * season + prof.diurnal * diurnal);
    }
  };
  for (int s = 0; s < inv.n_surface(); ++s) add_channel(inv.surface_vars[s], 1000, s);
  for (int l = 0; l < inv.n_levels(); ++l) {
    for (int v = 0; v < inv.n_pressure_vars(); ++v) {
      add_channel(inv.pressure_vars[v], inv.pressure_levels[l], inv.pressure_channel(v, l));
    }
  }
  return torch::stack(channels).to(torch::kFloat32);
}

torch::Tensor SyntheticWeather::topography() const {
  auto f = eval_mode(terrain_, lat_, lon_, 0.0);
  return (800.0 + 600.0 * f).clamp_min(0.0).to(torch::kFloat32);
}

torch::Tensor SyntheticWeather::driver(const torch::Tensor& lat, const torch::Tensor& lon,
                                       double hours) const {
  return 0.8 * eval_mode(modes_[0], lat, lon, hours) + 0.6 * eval_mode(modes_[1], lat, lon, hours);
}

torch::Tensor SyntheticWeather::rate_from_driver(const torch::Tensor& d) {
  // Thresholded power law: most pixels dry, a long tail of heavy rain.
  return 6.0 * (d - 0.7).clamp_min(0.0).pow(1.5);
}

torch::Tensor SyntheticWeather::precip(Timestamp t) const {
  double hours = double(t.hours() - 262968);
  return rate_from_driver(driver(lat_, lon_, hours)).to(torch::kFloat32);
}

torch::Tensor SyntheticWeather::hires_precip(Timestamp t) const {
  double hours = double(t.hours() - 262968);
  const int f = opt_.raw_factor;
  double raw_res = hires_.resolution / f;
  double lat0 = hires_.lat_start - hires_.resolution / 2 + raw_res / 2;
  double lon0 = hires_.lon_start - hires_.resolution / 2 + raw_res / 2;
  auto lat = torch::arange(int64_t(hires_.n_lat) * f, torch::kDouble) * raw_res + lat0;
  auto lon = torch::arange(int64_t(hires_.n_lon) * f, torch::kDouble) * raw_res + lon0;
  auto d = driver(lat, lon, hours) + 0.35 * eval_mode(detail_, lat, lon, hours);
  auto raw = rate_from_driver(d);
  return avgpool_downsample(raw, f).to(torch::kFloat32);
}

DatasetManifest generate_synthetic(const std::filesystem::path& root, const SyntheticOptions& opt,
                                   bool force) {
  if (opt.runs.empty()) throw InvalidArgument("synthetic dataset needs at least one time run");
  for (const auto& r : opt.runs) {
    if (r.n_hours < 1) throw InvalidArgument("synthetic runs need n_hours >= 1");
  }
  SyntheticWeather weather(opt);
  DatasetManifest m;
  m.root = root;
  m.grid = opt.grid;
  m.inventory = opt.inventory;
  m.chunk_hours = opt.chunk_hours;
  if (opt.with_precip) m.hires_grid = synthetic_hires_grid(opt);
  m.attributes = {{"source", "synthetic"},
                  {"seed", opt.seed},
                  {"crop_lat", opt.crop_lat},
                  {"hires_refine", opt.hires_refine},
                  {"raw_factor", opt.raw_factor},
                  {"drift_deg_per_hour", opt.drift_deg_per_hour}};
  DatasetWriter writer(m, force);
  writer.set_topography(weather.topography());
  for (const auto& r : opt.runs) {
    for (int h = 0; h < r.n_hours; ++h) {
      auto t = r.start + h;
      if (opt.with_precip) {
        writer.append(t, weather.state(t), weather.precip(t), weather.hires_precip(t));
      } else {
        writer.append(t, weather.state(t));
      }
    }
  }
  return writer.finish();
}

torch::Tensor crop_to_grid(const torch::Tensor& values, const GridSpec& from, const GridSpec& to) {
  if (std::abs(from.resolution - to.resolution) > 1e-9 || from.n_lon != to.n_lon ||
      std::abs(from.lon_start - to.lon_start) > 1e-9) {
    throw InvalidArgument("crop target must share resolution and longitudes with the source grid");
  }
  int first = from.first_row_at_or_above(to.lat_start);
  if (std::abs(from.latitude(first) - to.lat_start) > 1e-9 || first + to.n_lat > from.n_lat) {
    throw InvalidArgument("crop target rows are not aligned with the source grid");
  }
  if (values.size(-2) != from.n_lat || values.size(-1) != from.n_lon) {
    throw ShapeError("crop input does not match its source grid");
  }
  return values.narrow(-2, first, to.n_lat);
}

}  // namespace regcast
