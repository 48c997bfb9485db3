#include <gtest/gtest.h>

#include <cmath>

#include "regcast/error.hpp"
#include "regcast/grid.hpp"
#include "regcast/nn_common.hpp"

using namespace regcast;

TEST(Timestamp, ParseFormatAndCalendar) {
  auto t = Timestamp::parse("2021072001");
  EXPECT_EQ(t, Timestamp::parse("2021-07-20T01"));
  EXPECT_EQ(t, Timestamp::from_ymdh(2021, 7, 20, 1));
  EXPECT_EQ(t.iso(), "2021-07-20T01");
  EXPECT_EQ(t.compact(), "2021072001");
  EXPECT_EQ(t.year(), 2021);
  EXPECT_EQ(t.month(), 7u);
  EXPECT_EQ(t.day(), 20u);
  EXPECT_EQ(t.hour_of_day(), 1u);
  EXPECT_EQ((t + 23).iso(), "2021-07-21T00");
  EXPECT_EQ(Timestamp::parse("2020-02-28T23") + 24, Timestamp::parse("2020-02-29T23"));
  EXPECT_EQ(Timestamp::parse("1970-01-01T00").hours(), 0);
  EXPECT_THROW(Timestamp::parse("2021-13-01T00"), InvalidArgument);
  EXPECT_THROW(Timestamp::parse("yesterday"), InvalidArgument);
}

TEST(GridSpec, FullScaleDimensions) {
  auto g = GridSpec::full_scale();
  EXPECT_EQ(g.n_lat, 241);
  EXPECT_EQ(g.n_lon, 281);
  EXPECT_DOUBLE_EQ(g.latitude(240), 60.0);
  EXPECT_DOUBLE_EQ(g.longitude(280), 140.0);
  EXPECT_NO_THROW(g.validate());
  auto c = g.crop_lat(15.0);
  EXPECT_EQ(c.n_lat, 181);
  EXPECT_DOUBLE_EQ(c.lat_start, 15.0);
  EXPECT_EQ(g.first_row_at_or_above(15.0), 60);
}

TEST(VariableInventory, FullScaleLayout) {
  auto inv = VariableInventory::full_scale();
  EXPECT_EQ(inv.channels(), 69);
  auto names = inv.channel_names();
  ASSERT_EQ(names.size(), 69u);
  EXPECT_EQ(names[0], "2mt");
  EXPECT_EQ(names[4], "z100");
  EXPECT_EQ(names[5], "t100");
  EXPECT_EQ(inv.channel_index("z500"), inv.pressure_channel(0, 7));
  EXPECT_THROW(inv.channel_index("z501"), InvalidArgument);
}

TEST(Boundary, FullScaleShape) {
  auto x = torch::zeros({69, 241, 281});
  auto b = extract_boundary(x, 4);
  EXPECT_EQ(b.sizes(), (std::vector<int64_t>{69, 4, 1044}));
}

TEST(Boundary, MatchesPerPixelOracle) {
  const int C = 2, H = 7, W = 9, wd = 3;
  auto x = torch::arange(C * H * W, torch::kFloat32).view({C, H, W});
  WeatherState s{x, Timestamp::parse("2021-01-01T00"), false};
  auto b = extract_boundary(s, wd);
  ASSERT_EQ(b.values.sizes(), (std::vector<int64_t>{C, wd, 2 * W + 2 * H}));
  EXPECT_EQ(b.perimeter(), 2 * W + 2 * H);
  EXPECT_EQ(b.time, s.time);
  auto v = b.values.accessor<float, 3>();
  auto a = x.accessor<float, 3>();
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < wd; ++k) {
      for (int j = 0; j < W; ++j) {
        ASSERT_EQ(v[c][k][j], a[c][k][j]);
        ASSERT_EQ(v[c][k][W + j], a[c][H - 1 - k][j]);
      }
      for (int i = 0; i < H; ++i) {
        ASSERT_EQ(v[c][k][2 * W + i], a[c][i][k]);
        ASSERT_EQ(v[c][k][2 * W + H + i], a[c][i][W - 1 - k]);
      }
    }
  EXPECT_THROW(extract_boundary(x, 0), InvalidArgument);
  EXPECT_THROW(extract_boundary(x, 4), InvalidArgument);
}

TEST(Transforms, NormalizeRoundTrip) {
  NormStats st;
  st.names = {"a", "b", "c"};
  st.mean = {280.0, -3.0, 5e4};
  st.std = {10.0, 2.5, 300.0};
  auto gen = make_generator(1);
  auto x = torch::randn({3, 5, 6}, gen, torch::kDouble) * torch::tensor({10.0, 2.5, 300.0}, torch::kDouble).view({3, 1, 1}) +
           torch::tensor({280.0, -3.0, 5e4}, torch::kDouble).view({3, 1, 1});
  WeatherState s{x.to(torch::kFloat32), Timestamp(0), false};
  auto n = normalize(s, st);
  EXPECT_TRUE(n.normalized);
  EXPECT_LT(n.values.mean().abs().item<float>(), 1.0f);
  auto back = denormalize(n, st);
  auto rel = ((back.values.to(torch::kDouble) - x).abs() / x.abs().clamp_min(1.0)).max().item<double>();
  EXPECT_LT(rel, 1e-6);
  EXPECT_THROW(normalize(n, st), InvalidArgument);
  EXPECT_THROW(denormalize(s, st), InvalidArgument);
}

TEST(Transforms, DbzRoundTripAndFloor) {
  auto r = torch::logspace(std::log10(0.1), std::log10(200.0), 2000, 10.0, torch::kDouble);
  auto back = dbz_to_precip(precip_to_dbz(r));
  EXPECT_LT((back - r).abs().max().item<double>(), 1e-6 * 200.0);
  EXPECT_LT(((back - r).abs() / r).max().item<double>(), 1e-6);
  for (double v : {0.1, 1.0, 10.0, 200.0}) {
    EXPECT_NEAR(dbz_to_precip(precip_to_dbz(v)), v, 1e-6 * v);
    EXPECT_NEAR(precip_to_dbz(v), 10.0 * std::log10(200.0 * std::pow(v, 1.6)), 1e-12);
  }
  EXPECT_DOUBLE_EQ(precip_to_dbz(0.0), dbz_floor());
  EXPECT_EQ(dbz_to_precip(dbz_floor() - 1.0), 0.0);
  EXPECT_EQ(dbz_to_precip(torch::tensor({dbz_floor() - 5.0}, torch::kDouble)).item<double>(), 0.0);
}

TEST(Transforms, DownsamplePreservesMean) {
  auto gen = make_generator(2);
  auto x = torch::rand({3, 40, 60}, gen, torch::kDouble) * 50;
  auto d = avgpool_downsample(x, 5);
  EXPECT_EQ(d.sizes(), (std::vector<int64_t>{3, 8, 12}));
  EXPECT_NEAR(d.mean().item<double>(), x.mean().item<double>(), 1e-10);
  EXPECT_NEAR(d[1][2][3].item<double>(), x[1].slice(0, 10, 15).slice(1, 15, 20).mean().item<double>(), 1e-12);
  EXPECT_THROW(avgpool_downsample(x, 7), InvalidArgument);
}

TEST(Transforms, CropRows) {
  auto x = torch::arange(24).view({2, 3, 4});
  auto c = crop_rows(x, 1);
  EXPECT_EQ(c.sizes(), (std::vector<int64_t>{2, 2, 4}));
  EXPECT_EQ(c[0][0][0].item<int64_t>(), 4);
}

TEST(Climatology, BuilderMeansPerKeyAndRejectsGaps) {
  ClimatologyBuilder b({"x"}, 2, 2);
  const auto start = Timestamp::parse("2019-01-01T00");
  // Every (month, hour) key twice: once in 2019 and once in 2020 with +2.
  for (int y = 0; y < 2; ++y)
    for (int m = 1; m <= 12; ++m)
      for (int h = 0; h < 24; ++h) {
        auto t = Timestamp::from_ymdh(2019 + y, m, 10, h);
        b.add(t, torch::full({1, 2, 2}, double(m * 100 + h + 2 * y)));
      }
  auto c = b.finish(2019, 2020);
  EXPECT_EQ(c.fields.sizes(), (std::vector<int64_t>{12, 24, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(c.at(Timestamp::from_ymdh(2021, 7, 3, 5), "x")[1][1].item<double>(), 705.0 + 1.0);
  EXPECT_EQ(c.index_of("x"), 0);
  ClimatologyBuilder gap({"x"}, 2, 2);
  gap.add(start, torch::zeros({1, 2, 2}));
  EXPECT_THROW(gap.finish(2019, 2019), InvalidArgument);
}
