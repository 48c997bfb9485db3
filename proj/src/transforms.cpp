#include <cmath>

#include "regcast/error.hpp"
#include "regcast/grid.hpp"

namespace regcast {

namespace idx = torch::indexing;

// ---------------------------------------------------------------------------
// Boundary

torch::Tensor extract_boundary(const torch::Tensor& values, int width) {
  if (values.dim() < 3) throw ShapeError("boundary extraction needs [..., C, H, W]");
  if (width < 1) throw InvalidArgument("boundary width must be >= 1");
  const auto n_lat = values.size(-2);
  const auto n_lon = values.size(-1);
  if (n_lat <= 2 * width || n_lon <= 2 * width) {
    throw InvalidArgument("grid " + std::to_string(n_lat) + "x" + std::to_string(n_lon) +
                          " too small for boundary width " + std::to_string(width));
  }
  // Row strips: [..., C, width, n_lon]
  auto first_rows = values.index({idx::Ellipsis, idx::Slice(0, width), idx::Slice()});
  auto last_rows = values.index({idx::Ellipsis, idx::Slice(n_lat - width, n_lat), idx::Slice()});
  // Column strips, outermost column first: [..., C, width, n_lat]
  auto first_cols =
      values.index({idx::Ellipsis, idx::Slice(), idx::Slice(0, width)}).transpose(-1, -2);
  auto last_cols = values.index({idx::Ellipsis, idx::Slice(), idx::Slice(n_lon - width, n_lon)})
                       .flip({-1})
                       .transpose(-1, -2);
  // Last rows also run outermost-first so index 0 of the width axis is always the edge.
  last_rows = last_rows.flip({-2});
  return torch::cat({first_rows, last_rows, first_cols, last_cols}, -1).contiguous();
}

BoundaryStrip extract_boundary(const WeatherState& state, int width) {
  BoundaryStrip strip;
  strip.values = extract_boundary(state.values, width);
  strip.width = width;
  strip.n_lat = int(state.values.size(-2));
  strip.n_lon = int(state.values.size(-1));
  strip.time = state.time;
  return strip;
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

torch::Tensor broadcast_stat(const std::vector<double>& v, const torch::Tensor& like,
                             int64_t channel_dim) {
  auto t = torch::tensor(v, torch::TensorOptions().dtype(torch::kDouble)).to(like.scalar_type());
  std::vector<int64_t> shape(like.dim(), 1);
  auto cd = channel_dim < 0 ? channel_dim + like.dim() : channel_dim;
  shape[cd] = int64_t(v.size());
  return t.view(shape);
}

void check_channels(const torch::Tensor& x, const NormStats& stats, int64_t channel_dim) {
  if (x.size(channel_dim) != stats.size()) {
    throw ShapeError("stats have " + std::to_string(stats.size()) + " channels, data has " +
                     std::to_string(x.size(channel_dim)));
  }
}

}  // namespace

torch::Tensor normalize_channels(const torch::Tensor& x, const NormStats& stats,
                                 int64_t channel_dim) {
  check_channels(x, stats, channel_dim);
  return (x - broadcast_stat(stats.mean, x, channel_dim)) / broadcast_stat(stats.std, x, channel_dim);
}

torch::Tensor denormalize_channels(const torch::Tensor& x, const NormStats& stats,
                                   int64_t channel_dim) {
  check_channels(x, stats, channel_dim);
  return x * broadcast_stat(stats.std, x, channel_dim) + broadcast_stat(stats.mean, x, channel_dim);
}

WeatherState normalize(const WeatherState& state, const NormStats& stats) {
  if (state.normalized) throw InvalidArgument("state at " + state.time.iso() + " is already normalized");
  WeatherState out{normalize_channels(state.values, stats, -3), state.time, true};
  return out;
}

WeatherState denormalize(const WeatherState& state, const NormStats& stats) {
  if (!state.normalized) throw InvalidArgument("state at " + state.time.iso() + " is not normalized");
  WeatherState out{denormalize_channels(state.values, stats, -3), state.time, false};
  return out;
}

// ---------------------------------------------------------------------------
// dBZ

double dbz_floor() { return 10.0 * std::log10(200.0 * std::pow(kMinRainRate, 1.6)); }

double precip_to_dbz(double rate) {
  if (!(rate >= 0.0)) throw InvalidArgument("precipitation rate must be non-negative");
  double r = std::max(rate, kMinRainRate);
  return 10.0 * std::log10(200.0 * std::pow(r, 1.6));
}

double dbz_to_precip(double dbz) {
  if (dbz < dbz_floor()) return 0.0;
  return std::pow(std::pow(10.0, dbz / 10.0) / 200.0, 1.0 / 1.6);
}

torch::Tensor precip_to_dbz(const torch::Tensor& rate) {
  if ((rate < 0).any().item<bool>()) throw InvalidArgument("precipitation rate must be non-negative");
  auto r = rate.clamp_min(kMinRainRate);
  return 10.0 * torch::log10(200.0 * torch::pow(r, 1.6));
}

torch::Tensor dbz_to_precip(const torch::Tensor& dbz) {
  auto rate = torch::pow(torch::pow(10.0, dbz / 10.0) / 200.0, 1.0 / 1.6);
  return torch::where(dbz < dbz_floor(), torch::zeros_like(rate), rate);
}

// ---------------------------------------------------------------------------
// Downsampling and cropping

torch::Tensor avgpool_downsample(const torch::Tensor& field, int factor) {
  if (factor < 1) throw InvalidArgument("downsample factor must be >= 1");
  if (field.dim() < 2) throw ShapeError("downsampling needs at least [H, W]");
  const auto h = field.size(-2);
  const auto w = field.size(-1);
  if (h % factor != 0 || w % factor != 0) {
    throw InvalidArgument(std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by factor " + std::to_string(factor));
  }
  auto lead = field.sizes().slice(0, field.dim() - 2).vec();
  auto shape = lead;
  shape.insert(shape.end(), {h / factor, int64_t(factor), w / factor, int64_t(factor)});
  auto blocks = field.reshape(shape);
  return blocks.mean({-3, -1});
}

torch::Tensor crop_rows(const torch::Tensor& field, int first_row) {
  if (first_row < 0 || first_row >= field.size(-2)) throw InvalidArgument("crop row out of range");
  return field.index({idx::Ellipsis, idx::Slice(first_row, idx::None), idx::Slice()});
}

// ---------------------------------------------------------------------------
// Climatology

ClimatologyBuilder::ClimatologyBuilder(std::vector<std::string> names, int n_lat, int n_lon)
    : names_(std::move(names)),
      sums_(torch::zeros({12, 24, int64_t(names_.size()), n_lat, n_lon}, torch::kDouble)) {}

void ClimatologyBuilder::add(Timestamp t, const torch::Tensor& values) {
  if (values.dim() != 3 || values.size(0) != sums_.size(2) || values.size(1) != sums_.size(3) ||
      values.size(2) != sums_.size(4)) {
    throw ShapeError("climatology sample shape mismatch");
  }
  auto m = int64_t(t.month()) - 1;
  auto h = int64_t(t.hour_of_day());
  sums_[m][h] += values.to(torch::kDouble);
  counts_[m * 24 + h] += 1;
}

Climatology ClimatologyBuilder::finish(int first_year, int last_year) const {
  auto fields = torch::empty_like(sums_);
  for (int m = 0; m < 12; ++m) {
    for (int h = 0; h < 24; ++h) {
      auto n = counts_[m * 24 + h];
      if (n == 0) {
        throw InvalidArgument("climatology key (month " + std::to_string(m + 1) + ", hour " +
                              std::to_string(h) + ") has no samples");
      }
      fields[m][h] = sums_[m][h] / double(n);
    }
  }
  return Climatology{fields, names_, first_year, last_year};
}

}  // namespace regcast
