#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "regcast/error.hpp"
#include "regcast/metrics.hpp"
#include "regcast/nn_common.hpp"
#include "regcast/rollout.hpp"
#include "regcast/synthetic.hpp"
#include "test_support.hpp"

using namespace regcast;

namespace {

using Field = std::vector<std::vector<double>>;

Field to_field(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  Field f(c.size(0), std::vector<double>(c.size(1)));
  auto a = c.accessor<double, 2>();
  for (size_t i = 0; i < f.size(); ++i)
    for (size_t j = 0; j < f[i].size(); ++j) f[i][j] = a[i][j];
  return f;
}

double oracle_rmse(const Field& p, const Field& o, const std::vector<double>& w) {
  double s = 0;
  size_t n = 0;
  for (size_t i = 0; i < p.size(); ++i)
    for (size_t j = 0; j < p[i].size(); ++j, ++n) s += w[i] * (p[i][j] - o[i][j]) * (p[i][j] - o[i][j]);
  return std::sqrt(s / double(n));
}

double oracle_acc(const Field& p, const Field& o, const Field& c, const std::vector<double>& w) {
  const size_t H = p.size(), W = p[0].size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < H; ++i)
    for (size_t j = 0; j < W; ++j) {
      ma += p[i][j] - c[i][j];
      mb += o[i][j] - c[i][j];
    }
  ma /= double(H * W);
  mb /= double(H * W);
  double num = 0, da = 0, db = 0;
  for (size_t i = 0; i < H; ++i)
    for (size_t j = 0; j < W; ++j) {
      const double a = p[i][j] - c[i][j] - ma, b = o[i][j] - c[i][j] - mb;
      num += w[i] * a * b;
      da += w[i] * a * a;
      db += w[i] * b * b;
    }
  return num / std::sqrt(da * db);
}

std::vector<double> cos_weights(const GridSpec& g) {
  std::vector<double> w;
  for (int i = 0; i < g.n_lat; ++i) w.push_back(std::cos(g.latitude(i) * std::numbers::pi / 180.0));
  return w;
}

}  // namespace

TEST(LatWeights, CosineOfLatitude) {
  auto w = LatWeights::from_grid(GridSpec::full_scale());
  ASSERT_EQ(w.n_lat(), 241);
  EXPECT_NEAR(w.rows[240].item<double>(), 0.5, 1e-15);  // 60N
  EXPECT_DOUBLE_EQ(w.rows[0].item<double>(), 1.0);
  EXPECT_TRUE((w.rows > 0).all().item<bool>());
  EXPECT_TRUE((w.rows <= 1).all().item<bool>());
  auto n = LatWeights::from_grid(GridSpec::full_scale(), true);
  EXPECT_NEAR(n.rows.mean().item<double>(), 1.0, 1e-14);
  EXPECT_THROW(LatWeights::from_latitudes({90.0}), InvalidArgument);
}

TEST(WeightedRmse, TrivialCases) {
  auto w = LatWeights::from_latitudes(std::vector<double>(4, 0.0));
  auto x = torch::randn({4, 5}, torch::kDouble);
  EXPECT_EQ(weighted_rmse(x, x, w), 0.0);
  EXPECT_DOUBLE_EQ(weighted_rmse(x + 2.0, x, w), 2.0);
  auto plain = std::sqrt((x - x.flip(1)).pow(2).mean().item<double>());
  EXPECT_NEAR(weighted_rmse(x, x.flip(1), w), plain, 1e-14);
}

TEST(WeightedRmse, ErrorsOnBadInput) {
  auto w = LatWeights::from_latitudes(std::vector<double>(4, 10.0));
  auto x = torch::randn({4, 5}, torch::kDouble);
  EXPECT_THROW(weighted_rmse(x, torch::zeros({4, 6}, torch::kDouble), w), ShapeError);
  EXPECT_THROW(weighted_rmse(torch::randn({3, 5}), torch::randn({3, 5}), w), ShapeError);
  auto bad = x.clone();
  bad[1][1] = NAN;
  EXPECT_THROW(weighted_rmse(bad, x, w), NumericalError);
}

TEST(WeightedRmse, MatchesDirectSummationAndProperties) {
  auto g = GridSpec::toy(16, 16, 2.0, 10.0);
  auto w = LatWeights::from_grid(g);
  auto ws = cos_weights(g);
  auto gen = make_generator(1);
  for (int k = 0; k < 200; ++k) {
    auto p = torch::randn({16, 16}, gen, torch::kDouble), o = torch::randn({16, 16}, gen, torch::kDouble);
    const double r = weighted_rmse(p, o, w);
    ASSERT_NEAR(r, oracle_rmse(to_field(p), to_field(o), ws), 1e-10);
    ASSERT_NEAR(weighted_rmse(o, p, w), r, 1e-14);
    ASSERT_NEAR(weighted_rmse(-3.0 * p, -3.0 * o, w), 3.0 * r, 1e-12);
  }
}

TEST(WeightedAcc, TrivialCases) {
  auto w = LatWeights::from_latitudes(std::vector<double>(6, 30.0));
  auto gen = make_generator(2);
  auto o = torch::randn({6, 7}, gen, torch::kDouble), c = torch::randn({6, 7}, gen, torch::kDouble);
  EXPECT_NEAR(*weighted_acc(o, o, c, w), 1.0, 1e-14);
  EXPECT_NEAR(*weighted_acc(2 * c - o, o, c, w), -1.0, 1e-14);
  EXPECT_FALSE(weighted_acc(c, o, c, w).has_value());  // zero forecast anomaly
  EXPECT_NEAR(*weighted_acc(o, o, torch::Tensor(), w, AccMode::kFieldMean), 1.0, 1e-14);
  EXPECT_THROW(weighted_acc(o, o, torch::Tensor(), w), InvalidArgument);
}

TEST(WeightedAcc, MatchesDirectSummationAndInvariants) {
  auto g = GridSpec::toy(16, 16, 2.0, 10.0);
  auto w = LatWeights::from_grid(g);
  auto ws = cos_weights(g);
  auto gen = make_generator(3);
  for (int k = 0; k < 200; ++k) {
    auto p = torch::randn({16, 16}, gen, torch::kDouble), o = torch::randn({16, 16}, gen, torch::kDouble);
    auto c = torch::randn({16, 16}, gen, torch::kDouble);
    const double a = *weighted_acc(p, o, c, w);
    ASSERT_NEAR(a, oracle_acc(to_field(p), to_field(o), to_field(c), ws), 1e-10);
    ASSERT_GE(a, -1.0);
    ASSERT_LE(a, 1.0);
    ASSERT_NEAR(*weighted_acc(p + 4.5, o + 4.5, c, w), a, 1e-12);
    ASSERT_NEAR(*weighted_acc(c + 2.0 * (p - c), c + 0.5 * (o - c), c, w), a, 1e-12);
    // Field-mean mode is the anomaly mode with a zero climatology.
    ASSERT_NEAR(*weighted_acc(p, o, torch::Tensor(), w, AccMode::kFieldMean),
                *weighted_acc(p, o, torch::zeros_like(p), w), 1e-14);
  }
}

TEST(Contingency, TrivialAndErrors) {
  auto gen = make_generator(4);
  auto x = torch::rand({8, 8}, gen, torch::kDouble) * 10;
  auto same = contingency(x, x, 1.0);
  EXPECT_EQ(same.false_alarms, 0);
  EXPECT_EQ(same.misses, 0);
  auto fa = contingency(torch::full({8, 8}, 6.0), torch::full({8, 8}, 0.5), 5.0);
  EXPECT_EQ(fa.false_alarms, 64);
  EXPECT_EQ(fa.total(), 64);
  EXPECT_THROW(contingency(x, x, -0.1), InvalidArgument);
  EXPECT_THROW(contingency(-x, x, 1.0), InvalidArgument);
  EXPECT_THROW(contingency(x, x.narrow(0, 0, 7), 1.0), ShapeError);
}

TEST(Contingency, MatchesPerPixelClassification) {
  auto gen = make_generator(5);
  for (int k = 0; k < 100; ++k) {
    auto p = torch::randint(0, 2, {8, 8}, gen, torch::kDouble) * 2.0;
    auto o = torch::randint(0, 2, {8, 8}, gen, torch::kDouble) * 2.0;
    auto c = contingency(p, o, 1.0);
    int64_t h = 0, f = 0, m = 0, n = 0;
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        const bool pe = p[i][j].item<double>() >= 1.0, oe = o[i][j].item<double>() >= 1.0;
        h += pe && oe;
        f += pe && !oe;
        m += !pe && oe;
        n += !pe && !oe;
      }
    ASSERT_EQ(c.hits, h);
    ASSERT_EQ(c.false_alarms, f);
    ASSERT_EQ(c.misses, m);
    ASSERT_EQ(c.true_negatives, n);
    ASSERT_EQ(c.total(), 64);
    if (ts(c) && pod(c)) ASSERT_LE(*ts(c), *pod(c));
  }
}

TEST(Scores, ArithmeticAndUndefined) {
  ContingencyCounts c{2, 1, 1, 0, 1.0};
  EXPECT_DOUBLE_EQ(*ts(c), 0.5);
  EXPECT_DOUBLE_EQ(*pod(c), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*far(c), 1.0 / 3.0);
  ContingencyCounts all{5, 0, 0, 3, 1.0};
  EXPECT_EQ(*ts(all), 1.0);
  EXPECT_EQ(*pod(all), 1.0);
  EXPECT_EQ(*far(all), 0.0);
  ContingencyCounts none{0, 0, 0, 9, 1.0};
  EXPECT_FALSE(ts(none));
  EXPECT_FALSE(pod(none));
  EXPECT_FALSE(far(none));
}

TEST(MetricTable, CsvRoundTrip) {
  testkit::TempDir dir;
  MetricTable t;
  t.rows.push_back({"2mt", 1, "rmse", 0.1234567890123, 3});
  t.rows.push_back({"tp", 1, "ts@0.1", std::nullopt, 2});
  t.write_csv(dir / "m.csv");
  auto r = MetricTable::read_csv(dir / "m.csv");
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(*r.find("2mt", 1, "rmse")->value, 0.1234567890123);
  EXPECT_FALSE(r.find("tp", 1, "ts@0.1")->value);
  EXPECT_EQ(r.find("tp", 1, "ts@0.1")->n_samples, 2);
  EXPECT_EQ(r.variables(), (std::vector<std::string>{"2mt", "tp"}));
  EXPECT_EQ(threshold_metric("ts", 10.0), "ts@10");
  EXPECT_THROW(MetricTable::read_csv(dir / "none.csv"), NotFoundError);
}

namespace {

struct Archives {
  testkit::TempDir dir;
  std::optional<Dataset> truth;
  std::optional<Dataset> forecast;
  Climatology clim;
};

/// Truth from the synthetic generator; the forecast archive replays truth with
/// a per-lead offset.
void build_archives(Archives& a, double offset, const std::vector<int>& leads = {1, 2, 5}) {
  auto inv = VariableInventory::toy();
  auto grid = GridSpec::toy(16, 16);
  auto opt = synthetic_contiguous(grid, inv, 12, 3);
  opt.with_precip = false;
  generate_synthetic(a.dir / "truth", opt);
  a.truth.emplace(Dataset::open(a.dir / "truth"));
  const auto init = a.truth->manifest().timestamps().front();
  RolloutResult r;
  r.init = init;
  r.plan = greedy_plan(leads.back());
  for (int lead : leads) {
    auto v = a.truth->load(Group::kState, init + lead) + offset * lead;
    r.leads.push_back(lead);
    r.states.push_back({v, init + lead, false});
  }
  NormStats id;
  id.names = inv.channel_names();
  id.mean.assign(id.names.size(), 0.0);
  id.std.assign(id.names.size(), 1.0);
  write_forecast(a.dir / "fc", r, id, grid, inv);
  a.forecast.emplace(Dataset::open(a.dir / "fc"));
  auto gen = make_generator(9);
  a.clim.names = id.names;
  a.clim.fields = torch::randn({12, 24, inv.channels(), 16, 16}, gen) * 3 +
                  a.truth->load(Group::kState, init).unsqueeze(0).unsqueeze(0);
}

}  // namespace

TEST(EvaluateRollout, TruthAgainstTruthIsPerfect) {
  Archives a;
  build_archives(a, 0.0);
  auto res = evaluate_rollout(*a.forecast, *a.truth, &a.clim);
  EXPECT_EQ(res.coverage, 1.0);
  const auto vars = std::vector<std::string>{"2mt", "u10", "v10", "mslp", "z500", "t500"};
  EXPECT_EQ(res.table.variables(), vars);
  for (const auto& v : vars)
    for (int lead : {1, 2, 5}) {
      EXPECT_EQ(*res.table.find(v, lead, "rmse")->value, 0.0) << v << " " << lead;
      EXPECT_NEAR(*res.table.find(v, lead, "acc")->value, 1.0, 1e-12) << v << " " << lead;
    }
}

TEST(EvaluateRollout, MatchesComposedMetricCalls) {
  Archives a;
  build_archives(a, 0.3);
  EvalOptions opt;
  opt.variables = {"z500"};
  auto res = evaluate_rollout(*a.forecast, *a.truth, &a.clim, opt);
  auto w = LatWeights::from_grid(a.truth->manifest().grid);
  const auto init = a.truth->manifest().timestamps().front();
  const int z = a.truth->manifest().inventory.channel_index("z500");
  for (int lead : {1, 2, 5}) {
    auto t = init + lead;
    auto f = a.forecast->load(Group::kState, t)[z], o = a.truth->load(Group::kState, t)[z];
    EXPECT_DOUBLE_EQ(*res.table.find("z500", lead, "rmse")->value, weighted_rmse(f, o, w));
    EXPECT_DOUBLE_EQ(*res.table.find("z500", lead, "acc")->value, *weighted_acc(f, o, a.clim.at(t, "z500"), w));
    EXPECT_GT(*res.table.find("z500", lead, "rmse")->value, 0.0);
  }
}

TEST(EvaluateRollout, ReportsCoverageAndMissingTruth) {
  Archives a;
  build_archives(a, 0.0);
  EvalOptions opt;
  opt.leads = {1, 40};
  auto res = evaluate_rollout(*a.forecast, *a.truth, &a.clim, opt);
  EXPECT_DOUBLE_EQ(res.coverage, 0.5);
  ASSERT_EQ(res.missing.size(), 1u);
  opt.leads = {40};
  EXPECT_THROW(evaluate_rollout(*a.forecast, *a.truth, &a.clim, opt), MissingTimestampError);
  EXPECT_THROW(evaluate_rollout(*a.forecast, *a.truth, nullptr), InvalidArgument);
}

TEST(ScorePrecipitation, PooledCountsAndHeavyRainRow) {
  auto gen = make_generator(11);
  std::vector<torch::Tensor> p, o;
  for (int i = 0; i < 3; ++i) {
    p.push_back(torch::rand({8, 8}, gen) * 15);
    o.push_back(torch::rand({8, 8}, gen) * 15);
  }
  auto t = score_precipitation(p, o, 1);
  for (double th : kDefaultPrecipThresholds) {
    ContingencyCounts c;
    for (int i = 0; i < 3; ++i) c += contingency(p[i], o[i], th);
    EXPECT_EQ(t.find("tp", 1, threshold_metric("ts", th))->value, ts(c));
    EXPECT_EQ(t.find("tp", 1, threshold_metric("pod", th))->value, pod(c));
    EXPECT_EQ(t.find("tp", 1, threshold_metric("far", th))->value, far(c));
  }
  EXPECT_NE(t.find("tp", 1, "ts@10"), nullptr);
}
