#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "regcast/checkpoint.hpp"
#include "regcast/dataset.hpp"
#include "regcast/forecaster.hpp"

namespace regcast {

inline constexpr const char* kForecasterCheckpointKind = "forecaster-checkpoint";

/// Normalized training examples for one lead time s:
/// x = X_t, strip = B_{t+s}, target = X_{t+s}.
struct ForecastBatch {
  torch::Tensor x;       // [B, C, H, W]
  torch::Tensor strip;   // [B, C, width, perimeter]
  torch::Tensor target;  // [B, C, H, W]
  int lead_hours = 1;
  std::vector<Timestamp> times;  // input times
};

/// (t, t + s) pairs of one split where both times are stored.
class PairSampler {
 public:
  /// `stats` must cover the inventory channels and "topography".
  PairSampler(const Dataset& ds, const NormStats& stats, Split split, int lead_hours, int boundary_width);

  std::size_t size() const { return inputs_.size(); }
  int lead_hours() const { return lead_; }
  const std::vector<Timestamp>& inputs() const { return inputs_; }
  /// Normalized topography [H, W].
  const torch::Tensor& topography() const { return topo_; }

  ForecastBatch batch(const std::vector<std::size_t>& indices) const;
  /// Batch drawn with replacement from a generator seeded by (seed, step), so
  /// a resumed run sees the same batches as an uninterrupted one.
  ForecastBatch sample(std::int64_t step, int batch_size, std::uint64_t seed) const;
  /// Normalized state at t.
  torch::Tensor state(Timestamp t) const;

 private:
  const Dataset* ds_;
  NormStats stats_;
  int lead_;
  int width_;
  std::vector<Timestamp> inputs_;
  torch::Tensor topo_;
};

struct ForecasterTrainOptions {
  double lr = 3e-4;
  double weight_decay = 3e-6;
  int batch_size = 4;
  std::uint64_t seed = 0;
};

class ForecasterTrainer {
 public:
  ForecasterTrainer(Forecaster model, ForecasterTrainOptions opt = {});

  /// One AdamW step on the MSE over all channels and pixels in normalized
  /// space; returns the loss before the update. Throws InvalidArgument when the
  /// batch lead differs from the model lead and NumericalError on a
  /// non-finite loss.
  double train_step(const ForecastBatch& batch, const torch::Tensor& topography);
  double eval_mse(const ForecastBatch& batch, const torch::Tensor& topography);

  /// Runs `steps` sampled steps; `on_step(step, loss)` is called after each.
  std::vector<double> fit(const PairSampler& data, std::int64_t steps,
                          const std::function<void(std::int64_t, double)>& on_step = {});

  std::int64_t step() const { return step_; }
  Forecaster& model() { return model_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }
  const ForecasterTrainOptions& options() const { return opt_; }

  void save(const std::filesystem::path& path) const;
  /// Restores model, optimizer state and step count; the architecture comes
  /// from the checkpoint.
  static ForecasterTrainer resume(const std::filesystem::path& path, ForecasterTrainOptions opt = {});

 private:
  Forecaster model_;
  ForecasterTrainOptions opt_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::int64_t step_ = 0;
};

/// Inference load; verifies the stored fingerprint against the stored config
/// and, when given, against `expected`.
Forecaster load_forecaster(const std::filesystem::path& path, const ForecasterConfig* expected = nullptr);

/// New model for lead `lead_hours` in {3, 6, 24}, initialized from a lead-1
/// base and trained on `data` (which must pair (t, t + lead_hours)).
Forecaster finetune_leadtime(Forecaster& base, int lead_hours, const PairSampler& data, std::int64_t steps,
                             ForecasterTrainOptions opt = {},
                             const std::function<void(std::int64_t, double)>& on_step = {});

}  // namespace regcast
