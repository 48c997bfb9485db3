#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "regcast/dataset.hpp"
#include "regcast/forecaster.hpp"

namespace regcast {

/// Step sizes of the available forecast models, largest first.
inline constexpr std::array<int, 4> kStepHours{24, 6, 3, 1};
inline constexpr int kMaxLeadHours = 120;

struct RolloutPlan {
  int lead_hours = 0;
  std::vector<int> steps;  // non-increasing, sums to lead_hours

  /// Cumulative lead after each step.
  std::vector<int> cumulative() const;
};

/// Repeatedly takes the largest step not exceeding the remaining lead.
/// Throws InvalidArgument unless 1 <= lead_hours <= 120.
RolloutPlan greedy_plan(int lead_hours);

/// One fixed-lead forecast operator on normalized [C, H, W] states.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual int lead_hours() const = 0;
  virtual WeatherState step(const WeatherState& state, const std::optional<BoundaryStrip>& boundary) = 0;
};

/// Adapter running a trained forecaster.
class ForecasterStep : public StepModel {
 public:
  ForecasterStep(Forecaster model, torch::Tensor topography_normalized);
  int lead_hours() const override { return model_->cfg.lead_hours; }
  WeatherState step(const WeatherState& state, const std::optional<BoundaryStrip>& boundary) override;

 private:
  Forecaster model_;
  torch::Tensor topo_;
};

using ModelSet = std::map<int, std::shared_ptr<StepModel>>;

/// Normalized boundary strip valid at the requested absolute time, or nullopt
/// for the null-boundary mode.
using BoundaryProvider = std::function<std::optional<BoundaryStrip>(Timestamp)>;

/// Strips cut from the stored (normalized) truth of `ds`.
BoundaryProvider dataset_boundary_provider(const Dataset& ds, const NormStats& stats, int width);

struct RolloutResult {
  RolloutPlan plan;
  Timestamp init;
  std::vector<int> leads;            // cumulative lead of each state
  std::vector<WeatherState> states;  // normalized
};

/// Applies greedy_plan(lead_hours) step by step from the normalized state x0;
/// each step receives the boundary at its own target time. Throws
/// InvalidArgument before running when a required step model is missing;
/// provider failures propagate tagged with the failing target time.
RolloutResult rollout(const ModelSet& models, const WeatherState& x0, const BoundaryProvider& boundary,
                      int lead_hours);

/// Writes the denormalized states as a dataset directory (state group only)
/// whose attributes carry {"kind": "forecast", "init", "plan", "leads"}.
DatasetManifest write_forecast(const std::filesystem::path& dir, const RolloutResult& result,
                               const NormStats& stats, const GridSpec& grid, const VariableInventory& inventory,
                               bool force = false);

}  // namespace regcast
