#include <gtest/gtest.h>

#include <numeric>

#include "regcast/error.hpp"
#include "regcast/rollout.hpp"
#include "regcast/synthetic.hpp"
#include "test_support.hpp"

using namespace regcast;

namespace {

/// Minimum number of steps from {1, 3, 6, 24} summing to L, by breadth-first
/// search over remaining lead.
int bfs_min_steps(int L) {
  std::vector<int> dist(L + 1, -1);
  std::vector<int> frontier{0};
  dist[0] = 0;
  while (!frontier.empty()) {
    std::vector<int> next;
    for (int v : frontier)
      for (int s : {1, 3, 6, 24})
        if (v + s <= L && dist[v + s] < 0) {
          dist[v + s] = dist[v] + 1;
          next.push_back(v + s);
        }
    frontier = std::move(next);
  }
  return dist[L];
}

/// Adds its lead to every value and records the boundary times it saw.
class AddStep : public StepModel {
 public:
  explicit AddStep(int lead, std::vector<std::pair<int, Timestamp>>* log) : lead_(lead), log_(log) {}
  int lead_hours() const override { return lead_; }
  WeatherState step(const WeatherState& s, const std::optional<BoundaryStrip>& b) override {
    if (log_) log_->push_back({lead_, b ? b->time : Timestamp{}});
    return {s.values + double(lead_), s.time + lead_, true};
  }

 private:
  int lead_;
  std::vector<std::pair<int, Timestamp>>* log_;
};

/// Returns the stored truth at the target time, ignoring its input.
class TruthStep : public StepModel {
 public:
  TruthStep(int lead, const Dataset& ds, NormStats stats) : lead_(lead), ds_(ds), stats_(std::move(stats)) {}
  int lead_hours() const override { return lead_; }
  WeatherState step(const WeatherState& s, const std::optional<BoundaryStrip>&) override {
    auto t = s.time + lead_;
    return {normalize_channels(ds_.load(Group::kState, t), stats_, 0), t, true};
  }

 private:
  int lead_;
  const Dataset& ds_;
  NormStats stats_;
};

ModelSet add_models(std::vector<std::pair<int, Timestamp>>* log) {
  ModelSet m;
  for (int s : kStepHours) m[s] = std::make_shared<AddStep>(s, log);
  return m;
}

WeatherState zero_state(Timestamp t) { return {torch::zeros({2, 3, 3}), t, true}; }

}  // namespace

TEST(GreedyPlan, MatchesBreadthFirstMinimum) {
  for (int L = 1; L <= kMaxLeadHours; ++L) {
    auto p = greedy_plan(L);
    ASSERT_EQ(int(p.steps.size()), bfs_min_steps(L)) << "L=" << L;
    ASSERT_EQ(std::accumulate(p.steps.begin(), p.steps.end(), 0), L);
    ASSERT_TRUE(std::is_sorted(p.steps.rbegin(), p.steps.rend()));
    ASSERT_EQ(p.cumulative().back(), L);
  }
}

TEST(GreedyPlan, KnownPlansAndBounds) {
  EXPECT_EQ(greedy_plan(29).steps, (std::vector<int>{24, 3, 1, 1}));
  EXPECT_EQ(greedy_plan(5).steps, (std::vector<int>{3, 1, 1}));
  EXPECT_EQ(greedy_plan(1).steps, (std::vector<int>{1}));
  EXPECT_EQ(greedy_plan(120).steps, (std::vector<int>(5, 24)));
  EXPECT_EQ(greedy_plan(29).cumulative(), (std::vector<int>{24, 27, 28, 29}));
  EXPECT_THROW(greedy_plan(0), InvalidArgument);
  EXPECT_THROW(greedy_plan(121), InvalidArgument);
}

TEST(Rollout, ComposesStepsWithBoundaryAtEachTarget) {
  std::vector<std::pair<int, Timestamp>> log;
  auto models = add_models(&log);
  const auto t0 = Timestamp::parse("2021-07-20T01");
  BoundaryProvider provider = [](Timestamp t) -> std::optional<BoundaryStrip> {
    BoundaryStrip b;
    b.time = t;
    return b;
  };
  auto r = rollout(models, zero_state(t0), provider, 29);
  EXPECT_EQ(r.leads, (std::vector<int>{24, 27, 28, 29}));
  ASSERT_EQ(r.states.size(), 4u);
  EXPECT_TRUE(torch::equal(r.states.back().values, torch::full({2, 3, 3}, 29.0)));
  EXPECT_EQ(r.states.back().time, t0 + 29);
  ASSERT_EQ(log.size(), 4u);
  const std::vector<int> cum{24, 27, 28, 29};
  for (size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(log[i].first, r.plan.steps[i]);
    EXPECT_EQ(log[i].second, t0 + cum[i]);
  }
}

TEST(Rollout, RefusesMissingOrMislabelledModelsBeforeRunning) {
  std::vector<std::pair<int, Timestamp>> log;
  auto models = add_models(&log);
  models.erase(3);
  EXPECT_THROW(rollout(models, zero_state(Timestamp::parse("2021-07-01T00")), {}, 29), InvalidArgument);
  EXPECT_TRUE(log.empty());
  EXPECT_NO_THROW(rollout(models, zero_state(Timestamp::parse("2021-07-01T00")), {}, 26));
  auto wrong = add_models(nullptr);
  wrong[6] = std::make_shared<AddStep>(3, nullptr);
  EXPECT_THROW(rollout(wrong, zero_state(Timestamp::parse("2021-07-01T00")), {}, 6), InvalidArgument);
  auto raw = zero_state(Timestamp::parse("2021-07-01T00"));
  raw.normalized = false;
  EXPECT_THROW(rollout(add_models(nullptr), raw, {}, 1), InvalidArgument);
}

TEST(Rollout, BoundaryFailureNamesTargetTime) {
  auto models = add_models(nullptr);
  const auto t0 = Timestamp::parse("2021-07-01T00");
  BoundaryProvider provider = [&](Timestamp t) -> std::optional<BoundaryStrip> {
    if (t == t0 + 27) throw MissingTimestampError("no truth");
    return std::nullopt;
  };
  try {
    rollout(models, zero_state(t0), provider, 29);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find((t0 + 27).iso()), std::string::npos) << e.what();
  }
}

class RolloutData : public ::testing::Test {
 protected:
  void SetUp() override {
    inv_ = VariableInventory::toy();
    grid_ = GridSpec::toy(16, 20);
    auto opt = synthetic_contiguous(grid_, inv_, 40, 5);
    opt.with_precip = false;
    generate_synthetic(dir_ / "truth", opt);
    ds_.emplace(Dataset::open(dir_ / "truth"));
    stats_ = compute_stats(*ds_);
  }

  testkit::TempDir dir_;
  VariableInventory inv_;
  GridSpec grid_;
  std::optional<Dataset> ds_;
  NormStats stats_;
};

TEST_F(RolloutData, SingleStepEqualsDirectPrediction) {
  auto cfg = ForecasterConfig::toy(grid_, inv_);
  cfg.embed.dim = 8;
  cfg.heads = {2, 2, 2};
  Forecaster model(cfg);
  model->eval();
  auto sel = stats_.select(inv_.channel_names());
  auto topo = (ds_->topography() - stats_.mean_of("topography")) / stats_.std_of("topography");
  const auto t0 = ds_->manifest().timestamps().front();
  WeatherState x0{normalize_channels(ds_->load(Group::kState, t0), sel, 0), t0, true};
  auto provider = dataset_boundary_provider(*ds_, stats_, cfg.boundary_width);
  ModelSet models{{1, std::make_shared<ForecasterStep>(model, topo)}};
  auto r = rollout(models, x0, provider, 1);
  auto direct = predict(model, x0, provider(t0 + 1), topo);
  ASSERT_EQ(r.states.size(), 1u);
  EXPECT_TRUE(torch::equal(r.states[0].values, direct.values));
}

TEST_F(RolloutData, ProviderCutsNormalizedTruth) {
  auto sel = stats_.select(inv_.channel_names());
  auto provider = dataset_boundary_provider(*ds_, stats_, 4);
  const auto t = ds_->manifest().timestamps()[3];
  auto strip = provider(t);
  ASSERT_TRUE(strip);
  EXPECT_EQ(strip->time, t);
  auto expect = extract_boundary(normalize_channels(ds_->load(Group::kState, t), sel, 0), 4);
  EXPECT_TRUE(torch::equal(strip->values, expect));
  EXPECT_THROW(provider(t + 1000), Error);
}

TEST_F(RolloutData, TruthReplayWritesTruthArchive) {
  const auto t0 = ds_->manifest().timestamps().front();
  ModelSet models;
  for (int s : kStepHours) models[s] = std::make_shared<TruthStep>(s, *ds_, stats_.select(inv_.channel_names()));
  WeatherState x0{torch::zeros({inv_.channels(), grid_.n_lat, grid_.n_lon}), t0, true};
  auto r = rollout(models, x0, {}, 29);
  auto m = write_forecast(dir_ / "fc", r, stats_, grid_, inv_);
  EXPECT_EQ(m.attributes.at("kind"), "forecast");
  EXPECT_EQ(m.attributes.at("plan").get<std::vector<int>>(), (std::vector<int>{24, 3, 1, 1}));
  EXPECT_EQ(m.attributes.at("init").get<std::string>(), t0.iso());
  auto fc = Dataset::open(dir_ / "fc");
  for (int lead : r.leads) {
    auto a = fc.load(Group::kState, t0 + lead), b = ds_->load(Group::kState, t0 + lead);
    EXPECT_LE((a - b).abs().max().item<float>(), 1e-3f * (b.abs().max().item<float>() + 1.0f)) << lead;
  }
  EXPECT_THROW(write_forecast(dir_ / "fc", r, stats_, grid_, inv_), Error);
  EXPECT_NO_THROW(write_forecast(dir_ / "fc", r, stats_, grid_, inv_, true));
}
