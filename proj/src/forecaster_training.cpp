#include "regcast/forecaster_training.hpp"

#include <random>

#include "regcast/error.hpp"

namespace regcast {

PairSampler::PairSampler(const Dataset& ds, const NormStats& stats, Split split, int lead_hours, int boundary_width)
    : ds_(&ds), lead_(lead_hours), width_(boundary_width) {
  if (lead_hours < 1) throw InvalidArgument("lead_hours must be positive");
  const auto& m = ds.manifest();
  stats_ = stats.select(m.inventory.channel_names());
  for (auto t : m.timestamps(split)) {
    if (m.contains(t + lead_hours) && m.split.split_of(t + lead_hours) == split) inputs_.push_back(t);
  }
  if (inputs_.empty()) {
    throw InvalidArgument("no (t, t+" + std::to_string(lead_hours) + ") pairs in split " + to_string(split));
  }
  if (!m.has_topography) throw InvalidArgument("dataset has no topography");
  topo_ = (ds.topography() - stats.mean_of("topography")) / stats.std_of("topography");
}

torch::Tensor PairSampler::state(Timestamp t) const {
  return normalize_channels(ds_->load(Group::kState, t), stats_, 0);
}

ForecastBatch PairSampler::batch(const std::vector<std::size_t>& indices) const {
  ForecastBatch b;
  b.lead_hours = lead_;
  std::vector<torch::Tensor> xs, ys;
  for (auto i : indices) {
    if (i >= inputs_.size()) throw InvalidArgument("pair index out of range");
    auto t = inputs_[i];
    xs.push_back(state(t));
    ys.push_back(state(t + lead_));
    b.times.push_back(t);
  }
  b.x = torch::stack(xs);
  b.target = torch::stack(ys);
  b.strip = extract_boundary(b.target, width_);
  return b;
}

ForecastBatch PairSampler::sample(std::int64_t step, int batch_size, std::uint64_t seed) const {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(step), std::uint32_t(step >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick(0, inputs_.size() - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return batch(idx);
}

ForecasterTrainer::ForecasterTrainer(Forecaster model, ForecasterTrainOptions opt)
    : model_(std::move(model)), opt_(opt) {
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(), torch::optim::AdamWOptions(opt_.lr).weight_decay(opt_.weight_decay));
}

double ForecasterTrainer::train_step(const ForecastBatch& batch, const torch::Tensor& topography) {
  if (batch.lead_hours != model_->cfg.lead_hours) {
    throw InvalidArgument("batch pairs lead " + std::to_string(batch.lead_hours) + " h but the model forecasts " +
                          std::to_string(model_->cfg.lead_hours) + " h");
  }
  model_->train();
  optimizer_->zero_grad();
  auto pred = model_->forward(batch.x, batch.strip, topography);
  auto loss = (pred - batch.target).pow(2).mean();
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    throw NumericalError("forecaster loss is " + std::to_string(value) + " at step " + std::to_string(step_));
  }
  loss.backward();
  optimizer_->step();
  ++step_;
  return value;
}

double ForecasterTrainer::eval_mse(const ForecastBatch& batch, const torch::Tensor& topography) {
  torch::NoGradGuard guard;
  model_->eval();
  return (model_->forward(batch.x, batch.strip, topography) - batch.target).pow(2).mean().item<double>();
}

std::vector<double> ForecasterTrainer::fit(const PairSampler& data, std::int64_t steps,
                                           const std::function<void(std::int64_t, double)>& on_step) {
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::int64_t i = 0; i < steps; ++i) {
    auto b = data.sample(step_, opt_.batch_size, opt_.seed);
    losses.push_back(train_step(b, data.topography()));
    if (on_step) on_step(step_, losses.back());
  }
  return losses;
}

void ForecasterTrainer::save(const std::filesystem::path& path) const {
  CheckpointInfo info;
  info.fingerprint = model_->cfg.fingerprint();
  info.config = model_->cfg;
  info.step = step_;
  info.seed = opt_.seed;
  info.extra = {{"lr", opt_.lr}, {"weight_decay", opt_.weight_decay}, {"batch_size", opt_.batch_size}};
  save_checkpoint(path, kForecasterCheckpointKind, *model_, info, optimizer_.get());
}

ForecasterTrainer ForecasterTrainer::resume(const std::filesystem::path& path, ForecasterTrainOptions opt) {
  auto info = read_checkpoint_info(path, kForecasterCheckpointKind);
  Forecaster model(info.config.get<ForecasterConfig>());
  ForecasterTrainer t(model, opt);
  info = load_checkpoint(path, kForecasterCheckpointKind, *model, model->cfg.fingerprint(), t.optimizer_.get());
  t.step_ = info.step;
  return t;
}

Forecaster load_forecaster(const std::filesystem::path& path, const ForecasterConfig* expected) {
  auto info = read_checkpoint_info(path, kForecasterCheckpointKind);
  auto cfg = info.config.get<ForecasterConfig>();
  if (expected && expected->fingerprint() != cfg.fingerprint()) {
    throw InvalidArgument("checkpoint " + path.string() + " architecture " + cfg.fingerprint() +
                          " does not match the configured " + expected->fingerprint());
  }
  Forecaster model(cfg);
  load_checkpoint(path, kForecasterCheckpointKind, *model, cfg.fingerprint());
  model->eval();
  return model;
}

Forecaster finetune_leadtime(Forecaster& base, int lead_hours, const PairSampler& data, std::int64_t steps,
                             ForecasterTrainOptions opt, const std::function<void(std::int64_t, double)>& on_step) {
  if (lead_hours != 3 && lead_hours != 6 && lead_hours != 24) {
    throw InvalidArgument("finetune lead must be 3, 6 or 24 h (got " + std::to_string(lead_hours) + ")");
  }
  if (base->cfg.lead_hours != 1) throw InvalidArgument("finetune base must be the 1 h model");
  if (data.lead_hours() != lead_hours) throw InvalidArgument("finetune data pairs the wrong lead time");
  auto cfg = base->cfg;
  cfg.lead_hours = lead_hours;
  Forecaster model(cfg);
  copy_state(*base, *model);
  ForecasterTrainer trainer(model, opt);
  trainer.fit(data, steps, on_step);
  model->eval();
  return model;
}

}  // namespace regcast
