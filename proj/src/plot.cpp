#include "regcast/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "regcast/error.hpp"

namespace regcast {

namespace {

using Rgb = std::array<double, 3>;

std::string hex(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", int(std::lround(255 * std::clamp(c[0], 0.0, 1.0))),
                int(std::lround(255 * std::clamp(c[1], 0.0, 1.0))), int(std::lround(255 * std::clamp(c[2], 0.0, 1.0))));
  return buf;
}

Rgb interpolate(const std::vector<Rgb>& stops, double u) {
  u = std::clamp(u, 0.0, 1.0) * double(stops.size() - 1);
  const auto i = std::min<std::size_t>(std::size_t(u), stops.size() - 2);
  const double f = u - double(i);
  return {stops[i][0] + f * (stops[i + 1][0] - stops[i][0]), stops[i][1] + f * (stops[i + 1][1] - stops[i][1]),
          stops[i][2] + f * (stops[i + 1][2] - stops[i][2])};
}

const std::vector<Rgb> kSequential{{0.267, 0.005, 0.329}, {0.229, 0.322, 0.546}, {0.128, 0.567, 0.551},
                                   {0.369, 0.789, 0.383}, {0.993, 0.906, 0.144}};
const std::vector<Rgb> kDiverging{{0.019, 0.188, 0.380}, {0.573, 0.773, 0.871}, {0.969, 0.969, 0.969},
                                  {0.957, 0.647, 0.510}, {0.404, 0.000, 0.122}};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw NotFoundError("cannot write " + path.string());
  os << text;
}

struct Series {
  std::vector<std::pair<double, double>> points;
};

/// One line chart inside the box (x0, y0, w, h).
void line_panel(std::ostringstream& svg, double x0, double y0, double w, double h, const std::string& label,
                const Series& s) {
  svg << "<rect x='" << x0 << "' y='" << y0 << "' width='" << w << "' height='" << h
      << "' fill='white' stroke='#444'/>\n";
  svg << "<text x='" << x0 + w / 2 << "' y='" << y0 - 8 << "' text-anchor='middle' font-size='13'>" << label
      << "</text>\n";
  if (s.points.empty()) return;
  double xmin = s.points.front().first, xmax = xmin, ymin = s.points.front().second, ymax = ymin;
  for (auto [x, y] : s.points) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) {
    ymin -= 0.5 * std::max(1e-12, std::abs(ymin));
    ymax += 0.5 * std::max(1e-12, std::abs(ymax));
    if (ymax == ymin) ymax = ymin + 1;
  }
  auto px = [&](double x) { return x0 + 10 + (w - 20) * (x - xmin) / (xmax - xmin); };
  auto py = [&](double y) { return y0 + h - 10 - (h - 20) * (y - ymin) / (ymax - ymin); };
  svg << "<polyline fill='none' stroke='#1f77b4' stroke-width='2' points='";
  for (auto [x, y] : s.points) svg << px(x) << "," << py(y) << " ";
  svg << "'/>\n";
  for (auto [x, y] : s.points) {
    svg << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='3' fill='#1f77b4'/>\n";
  }
  svg << "<text x='" << x0 << "' y='" << y0 + h + 16 << "' font-size='11'>lead " << fmt(xmin) << " h</text>\n";
  svg << "<text x='" << x0 + w << "' y='" << y0 + h + 16 << "' font-size='11' text-anchor='end'>" << fmt(xmax)
      << " h</text>\n";
  svg << "<text x='" << x0 - 4 << "' y='" << y0 + 14 << "' font-size='11' text-anchor='end'>" << fmt(ymax)
      << "</text>\n";
  svg << "<text x='" << x0 - 4 << "' y='" << y0 + h << "' font-size='11' text-anchor='end'>" << fmt(ymin)
      << "</text>\n";
}

/// Block-averages a field so neither side exceeds `max_side` cells.
torch::Tensor thin(const torch::Tensor& f, int64_t max_side) {
  const int64_t factor = std::max<int64_t>(1, (std::max(f.size(0), f.size(1)) + max_side - 1) / max_side);
  if (factor == 1) return f;
  return torch::adaptive_avg_pool2d(f.unsqueeze(0).unsqueeze(0),
                                    {(f.size(0) + factor - 1) / factor, (f.size(1) + factor - 1) / factor})
      .squeeze(0)
      .squeeze(0);
}

void map_panel(std::ostringstream& svg, double x0, double y0, double cell, const torch::Tensor& field, double lo,
               double hi, const std::vector<Rgb>& cmap, const std::string& label) {
  const auto a = field.accessor<double, 2>();
  const int64_t H = field.size(0), W = field.size(1);
  svg << "<text x='" << x0 + cell * W / 2 << "' y='" << y0 - 8 << "' text-anchor='middle' font-size='13'>" << label
      << "</text>\n";
  for (int64_t i = 0; i < H; ++i) {
    for (int64_t j = 0; j < W; ++j) {
      const double u = hi > lo ? (a[i][j] - lo) / (hi - lo) : 0.5;
      // Row 0 is the southern edge, drawn at the bottom.
      svg << "<rect x='" << x0 + cell * j << "' y='" << y0 + cell * (H - 1 - i) << "' width='" << cell + 0.05
          << "' height='" << cell + 0.05 << "' fill='" << hex(interpolate(cmap, u)) << "'/>\n";
    }
  }
  svg << "<rect x='" << x0 << "' y='" << y0 << "' width='" << cell * W << "' height='" << cell * H
      << "' fill='none' stroke='#444'/>\n";
  svg << "<text x='" << x0 << "' y='" << y0 + cell * H + 16 << "' font-size='11'>" << fmt(lo) << "</text>\n";
  svg << "<text x='" << x0 + cell * W << "' y='" << y0 + cell * H + 16 << "' font-size='11' text-anchor='end'>"
      << fmt(hi) << "</text>\n";
}

}  // namespace

void plot_score_curves(const std::filesystem::path& path, const MetricTable& table, const std::string& variable) {
  Series rmse, acc;
  for (const auto& r : table.rows) {
    if (r.variable != variable || !r.value) continue;
    if (r.metric == "rmse") rmse.points.push_back({double(r.lead_hours), *r.value});
    if (r.metric == "acc") acc.points.push_back({double(r.lead_hours), *r.value});
  }
  if (rmse.points.empty() && acc.points.empty()) {
    throw InvalidArgument("no RMSE or ACC rows for variable '" + variable + "'");
  }
  std::sort(rmse.points.begin(), rmse.points.end());
  std::sort(acc.points.begin(), acc.points.end());
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='760' height='330' font-family='sans-serif'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='380' y='22' text-anchor='middle' font-size='15'>" << variable << "</text>\n";
  line_panel(svg, 70, 60, 290, 220, "RMSE", rmse);
  line_panel(svg, 450, 60, 290, 220, "ACC", acc);
  svg << "</svg>\n";
  write_file(path, svg.str());
}

void plot_field_panels(const std::filesystem::path& path, const torch::Tensor& forecast, const torch::Tensor& truth,
                       const GridSpec& grid, const std::string& title) {
  if (forecast.dim() != 2 || forecast.sizes() != truth.sizes() || forecast.size(0) != grid.n_lat ||
      forecast.size(1) != grid.n_lon) {
    throw ShapeError("field panels need two [n_lat, n_lon] fields on the grid");
  }
  auto f = thin(forecast.to(torch::kDouble), 160), t = thin(truth.to(torch::kDouble), 160);
  auto d = f - t;
  const double lo = std::min(f.min().item<double>(), t.min().item<double>());
  const double hi = std::max(f.max().item<double>(), t.max().item<double>());
  double span = d.abs().max().item<double>();
  if (span == 0) span = 1e-12;
  const double cell = 240.0 / double(std::max(f.size(0), f.size(1)));
  const double pw = cell * f.size(1), ph = cell * f.size(0);
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << 3 * pw + 160 << "' height='" << ph + 110
      << "' font-family='sans-serif' shape-rendering='crispEdges'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << (3 * pw + 160) / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title << " ("
      << fmt(grid.lat_start) << "-" << fmt(grid.latitude(grid.n_lat - 1)) << "N, " << fmt(grid.lon_start) << "-"
      << fmt(grid.longitude(grid.n_lon - 1)) << "E)</text>\n";
  map_panel(svg, 40, 60, cell, f, lo, hi, kSequential, "forecast");
  map_panel(svg, 80 + pw, 60, cell, t, lo, hi, kSequential, "truth");
  map_panel(svg, 120 + 2 * pw, 60, cell, d, -span, span, kDiverging, "forecast - truth");
  svg << "</svg>\n";
  write_file(path, svg.str());
}

}  // namespace regcast
