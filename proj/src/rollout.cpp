#include "regcast/rollout.hpp"

#include <numeric>

#include "regcast/error.hpp"

namespace regcast {

std::vector<int> RolloutPlan::cumulative() const {
  std::vector<int> out(steps.size());
  std::partial_sum(steps.begin(), steps.end(), out.begin());
  return out;
}

RolloutPlan greedy_plan(int lead_hours) {
  if (lead_hours < 1 || lead_hours > kMaxLeadHours) {
    throw InvalidArgument("lead time must be in [1, " + std::to_string(kMaxLeadHours) + "] h (got " +
                          std::to_string(lead_hours) + ")");
  }
  RolloutPlan plan{lead_hours, {}};
  int remaining = lead_hours;
  for (int s : kStepHours) {
    while (remaining >= s) {
      plan.steps.push_back(s);
      remaining -= s;
    }
  }
  return plan;
}

ForecasterStep::ForecasterStep(Forecaster model, torch::Tensor topography_normalized)
    : model_(std::move(model)), topo_(std::move(topography_normalized)) {
  model_->eval();
}

WeatherState ForecasterStep::step(const WeatherState& state, const std::optional<BoundaryStrip>& boundary) {
  return predict(model_, state, boundary, topo_);
}

BoundaryProvider dataset_boundary_provider(const Dataset& ds, const NormStats& stats, int width) {
  auto sel = stats.select(ds.manifest().inventory.channel_names());
  return [&ds, sel, width](Timestamp t) -> std::optional<BoundaryStrip> {
    WeatherState s{normalize_channels(ds.load(Group::kState, t), sel, 0), t, true};
    return extract_boundary(s, width);
  };
}

RolloutResult rollout(const ModelSet& models, const WeatherState& x0, const BoundaryProvider& boundary,
                      int lead_hours) {
  if (!x0.normalized) throw InvalidArgument("rollout: initial state must be normalized");
  RolloutResult r;
  r.plan = greedy_plan(lead_hours);
  r.init = x0.time;
  for (int s : r.plan.steps) {
    auto it = models.find(s);
    if (it == models.end() || !it->second) {
      throw InvalidArgument("rollout: plan needs a " + std::to_string(s) + " h model");
    }
    if (it->second->lead_hours() != s) {
      throw InvalidArgument("rollout: model registered for " + std::to_string(s) + " h forecasts " +
                            std::to_string(it->second->lead_hours()) + " h");
    }
  }
  WeatherState cur = x0;
  int lead = 0;
  for (int s : r.plan.steps) {
    const Timestamp target = cur.time + s;
    std::optional<BoundaryStrip> strip;
    try {
      strip = boundary ? boundary(target) : std::nullopt;
    } catch (const Error& e) {
      throw StageError("boundary " + target.iso(), e);
    }
    cur = models.at(s)->step(cur, strip);
    lead += s;
    r.leads.push_back(lead);
    r.states.push_back(cur);
  }
  return r;
}

DatasetManifest write_forecast(const std::filesystem::path& dir, const RolloutResult& result,
                               const NormStats& stats, const GridSpec& grid, const VariableInventory& inventory,
                               bool force) {
  DatasetManifest m;
  m.root = dir;
  m.grid = grid;
  m.inventory = inventory;
  m.chunk_hours = 24;
  m.attributes = {{"kind", "forecast"},
                  {"init", result.init.iso()},
                  {"plan", result.plan.steps},
                  {"leads", result.leads}};
  auto sel = stats.select(inventory.channel_names());
  DatasetWriter w(m, force);
  for (const auto& s : result.states) {
    auto v = s.normalized ? denormalize_channels(s.values, sel, 0) : s.values;
    w.append(s.time, v.to(torch::kFloat32));
  }
  return w.finish();
}

}  // namespace regcast
