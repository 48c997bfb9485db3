#include "regcast/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "regcast/error.hpp"

namespace regcast {

namespace {

void check_pair(const torch::Tensor& pred, const torch::Tensor& obs, const char* what) {
  if (pred.sizes() != obs.sizes()) {
    throw ShapeError(std::string(what) + ": prediction and observation shapes differ");
  }
  if (pred.dim() < 2) throw ShapeError(std::string(what) + ": fields must be at least [H, W]");
  if (!torch::isfinite(pred).all().item<bool>() || !torch::isfinite(obs).all().item<bool>()) {
    throw NumericalError(std::string(what) + ": non-finite input");
  }
}

torch::Tensor row_weights(const LatWeights& w, const torch::Tensor& field) {
  if (field.size(-2) != w.n_lat()) {
    throw ShapeError("latitude weights have " + std::to_string(w.n_lat()) + " rows, field has " +
                     std::to_string(field.size(-2)));
  }
  return w.rows.view({-1, 1});
}

}  // namespace

LatWeights LatWeights::from_latitudes(const std::vector<double>& lats_deg, bool normalized) {
  if (lats_deg.empty()) throw InvalidArgument("latitude weights need at least one row");
  std::vector<double> w(lats_deg.size());
  for (size_t i = 0; i < w.size(); ++i) {
    if (std::abs(lats_deg[i]) >= 90.0) throw InvalidArgument("latitude weights exclude the poles");
    w[i] = std::cos(lats_deg[i] * std::numbers::pi / 180.0);
  }
  auto rows = torch::tensor(w, torch::kDouble);
  if (normalized) rows = rows / rows.mean();
  return {rows, normalized};
}

LatWeights LatWeights::from_grid(const GridSpec& grid, bool normalized) {
  return from_latitudes(grid.latitudes(), normalized);
}

double weighted_rmse(const torch::Tensor& pred, const torch::Tensor& obs, const LatWeights& w) {
  check_pair(pred, obs, "weighted_rmse");
  auto d = pred.to(torch::kDouble) - obs.to(torch::kDouble);
  auto wsq = row_weights(w, d) * d.pow(2);
  return std::sqrt(wsq.sum().item<double>() / double(d.numel()));
}

std::optional<double> weighted_acc(const torch::Tensor& pred, const torch::Tensor& obs, const torch::Tensor& clim,
                                   const LatWeights& w, AccMode mode) {
  check_pair(pred, obs, "weighted_acc");
  auto a = pred.to(torch::kDouble);
  auto b = obs.to(torch::kDouble);
  if (mode == AccMode::kAnomaly) {
    if (!clim.defined()) throw InvalidArgument("weighted_acc: anomaly mode needs a climatology field");
    if (clim.sizes() != pred.sizes() &&
        !(clim.dim() == 2 && clim.size(0) == pred.size(-2) && clim.size(1) == pred.size(-1))) {
      throw ShapeError("weighted_acc: climatology shape does not match the fields");
    }
    auto c = clim.to(torch::kDouble);
    a = a - c;
    b = b - c;
  }
  a = a - a.mean();
  b = b - b.mean();
  auto rw = row_weights(w, a);
  const double num = (rw * a * b).sum().item<double>();
  const double va = (rw * a * a).sum().item<double>();
  const double vb = (rw * b * b).sum().item<double>();
  if (!(va > 0.0) || !(vb > 0.0)) return std::nullopt;
  return std::clamp(num / std::sqrt(va * vb), -1.0, 1.0);
}

ContingencyCounts& ContingencyCounts::operator+=(const ContingencyCounts& o) {
  hits += o.hits;
  false_alarms += o.false_alarms;
  misses += o.misses;
  true_negatives += o.true_negatives;
  return *this;
}

ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& obs, double threshold) {
  if (!(threshold >= 0.0)) throw InvalidArgument("precipitation threshold must be >= 0");
  if (pred.sizes() != obs.sizes()) throw ShapeError("contingency: prediction and observation shapes differ");
  if (!torch::isfinite(pred).all().item<bool>() || !torch::isfinite(obs).all().item<bool>()) {
    throw NumericalError("contingency: non-finite input");
  }
  if ((pred < 0).any().item<bool>() || (obs < 0).any().item<bool>()) {
    throw InvalidArgument("contingency: precipitation fields must be non-negative");
  }
  auto p = pred.to(torch::kDouble) >= threshold;
  auto o = obs.to(torch::kDouble) >= threshold;
  ContingencyCounts c;
  c.threshold = threshold;
  c.hits = (p & o).sum().item<int64_t>();
  c.false_alarms = (p & ~o).sum().item<int64_t>();
  c.misses = (~p & o).sum().item<int64_t>();
  c.true_negatives = (~p & ~o).sum().item<int64_t>();
  return c;
}

namespace {
std::optional<double> ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return double(num) / double(den);
}
}  // namespace

std::optional<double> ts(const ContingencyCounts& c) { return ratio(c.hits, c.hits + c.false_alarms + c.misses); }
std::optional<double> pod(const ContingencyCounts& c) { return ratio(c.hits, c.hits + c.misses); }
std::optional<double> far(const ContingencyCounts& c) { return ratio(c.false_alarms, c.hits + c.false_alarms); }

// ---------------------------------------------------------------------------
// Tables

const MetricRow* MetricTable::find(const std::string& variable, int lead_hours, const std::string& metric) const {
  for (const auto& r : rows)
    if (r.variable == variable && r.lead_hours == lead_hours && r.metric == metric) return &r;
  return nullptr;
}

std::vector<std::string> MetricTable::variables() const {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.variable) == out.end()) out.push_back(r.variable);
  return out;
}

void MetricTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw NotFoundError("cannot write metric table " + path.string());
  f << "variable,lead_hours,metric,value,n_samples\n";
  for (const auto& r : rows) {
    if (r.variable.find(',') != std::string::npos || r.metric.find(',') != std::string::npos) {
      throw InvalidArgument("metric table names must not contain commas");
    }
    f << r.variable << ',' << r.lead_hours << ',' << r.metric << ',';
    if (r.value) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", *r.value);
      f << buf;
    } else {
      f << "undefined";
    }
    f << ',' << r.n_samples << '\n';
  }
  if (!f) throw Error(ErrorKind::kInternal, "failed writing metric table " + path.string());
}

MetricTable MetricTable::read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFoundError("metric table not found: " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "variable,lead_hours,metric,value,n_samples") {
    throw CorruptDataError(path.string() + ": missing metric table header");
  }
  MetricTable t;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 5) throw CorruptDataError(path.string() + ":" + std::to_string(lineno) + ": expected 5 columns");
    try {
      MetricRow r;
      r.variable = cols[0];
      r.lead_hours = std::stoi(cols[1]);
      r.metric = cols[2];
      if (cols[3] != "undefined") r.value = std::stod(cols[3]);
      r.n_samples = std::stoll(cols[4]);
      t.rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw CorruptDataError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return t;
}

std::string threshold_metric(const std::string& score, double threshold) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", threshold);
  return score + "@" + buf;
}

// ---------------------------------------------------------------------------
// Archive evaluation

namespace {

std::vector<std::string> default_variables(const VariableInventory& inv) {
  std::vector<std::string> out = inv.surface_vars;
  for (const auto& v : inv.pressure_vars)
    if (std::find(inv.pressure_levels.begin(), inv.pressure_levels.end(), 500) != inv.pressure_levels.end()) {
      out.push_back(v + "500");
    }
  return out;
}

struct Accum {
  double sum = 0.0;
  std::int64_t n = 0;
};

}  // namespace

EvalResult evaluate_rollouts(const std::vector<const Dataset*>& forecasts, const Dataset& truth,
                             const Climatology* climatology, const EvalOptions& opt) {
  if (forecasts.empty()) throw InvalidArgument("evaluate: no forecast archives");
  if (opt.acc_mode == AccMode::kAnomaly && !climatology) {
    throw InvalidArgument("evaluate: anomaly correlation needs a climatology");
  }
  const auto& tm = truth.manifest();
  const auto vars = opt.variables.empty() ? default_variables(tm.inventory) : opt.variables;
  const auto weights = LatWeights::from_grid(tm.grid, opt.normalize_weights);

  std::map<std::pair<std::string, int>, Accum> rmse, acc;
  std::set<int> leads_seen;
  std::int64_t requested = 0, scored = 0;
  EvalResult result;
  for (const Dataset* fc : forecasts) {
    const auto& fm = fc->manifest();
    if (!(fm.grid == tm.grid)) throw ShapeError("evaluate: forecast and truth grids differ");
    const auto& attrs = fm.attributes;
    if (!attrs.contains("init") || !attrs.contains("leads")) {
      throw InvalidArgument("evaluate: " + fm.root.string() + " is not a forecast archive");
    }
    const Timestamp init = Timestamp::parse(attrs.at("init").get<std::string>());
    auto leads = opt.leads.empty() ? attrs.at("leads").get<std::vector<int>>() : opt.leads;
    for (int lead : leads) {
      ++requested;
      const Timestamp t = init + lead;
      if (!fm.contains(t) || !tm.contains(t)) {
        result.missing.push_back(t);
        continue;
      }
      ++scored;
      leads_seen.insert(lead);
      auto f = fc->load(Group::kState, t);
      auto o = truth.load(Group::kState, t);
      for (const auto& v : vars) {
        const int fi = fm.inventory.channel_index(v), oi = tm.inventory.channel_index(v);
        auto pf = f[fi], of = o[oi];
        auto& r = rmse[{v, lead}];
        r.sum += weighted_rmse(pf, of, weights);
        ++r.n;
        torch::Tensor clim;
        if (opt.acc_mode == AccMode::kAnomaly) clim = climatology->at(t, v);
        auto a = weighted_acc(pf, of, clim, weights, opt.acc_mode);
        auto& ac = acc[{v, lead}];
        if (a) {
          ac.sum += *a;
          ++ac.n;
        }
      }
    }
  }
  result.coverage = requested ? double(scored) / double(requested) : 0.0;
  if (scored == 0) {
    throw MissingTimestampError("evaluate: no forecast valid time is present in the truth archive (coverage 0)");
  }
  for (const auto& v : vars) {
    for (int lead : leads_seen) {
      const auto& r = rmse[{v, lead}];
      if (r.n == 0) continue;
      result.table.rows.push_back({v, lead, "rmse", r.sum / double(r.n), r.n});
      const auto& a = acc[{v, lead}];
      result.table.rows.push_back(
          {v, lead, "acc", a.n ? std::optional<double>(a.sum / double(a.n)) : std::nullopt, a.n});
    }
  }
  return result;
}

EvalResult evaluate_rollout(const Dataset& forecast, const Dataset& truth, const Climatology* climatology,
                            const EvalOptions& opt) {
  return evaluate_rollouts({&forecast}, truth, climatology, opt);
}

MetricTable score_precipitation(const std::vector<torch::Tensor>& pred, const std::vector<torch::Tensor>& obs,
                                int lead_hours, const std::vector<double>& thresholds, const std::string& variable) {
  if (pred.size() != obs.size()) throw ShapeError("score_precipitation: prediction and observation counts differ");
  if (pred.empty()) throw InvalidArgument("score_precipitation: no fields");
  MetricTable t;
  for (double th : thresholds) {
    ContingencyCounts total;
    total.threshold = th;
    for (size_t i = 0; i < pred.size(); ++i) total += contingency(pred[i], obs[i], th);
    const auto n = std::int64_t(pred.size());
    t.rows.push_back({variable, lead_hours, threshold_metric("ts", th), ts(total), n});
    t.rows.push_back({variable, lead_hours, threshold_metric("pod", th), pod(total), n});
    t.rows.push_back({variable, lead_hours, threshold_metric("far", th), far(total), n});
  }
  return t;
}

}  // namespace regcast
