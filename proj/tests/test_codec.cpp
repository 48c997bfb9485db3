#include <gtest/gtest.h>

#include <cmath>

#include "regcast/codec.hpp"
#include "regcast/error.hpp"
#include "regcast/nn_common.hpp"
#include "test_support.hpp"

using namespace regcast;

namespace {

CodecSpec small_spec(CodecId id = CodecId::kState, std::array<int, 3> in = {3, 20, 24},
                     std::array<int, 3> lat = {4, 5, 6}) {
  CodecSpec s;
  s.id = id;
  s.input = in;
  s.latent = lat;
  s.widths = {8, 16};
  return s;
}

}  // namespace

TEST(CodecSpec, FullScaleTable) {
  auto st = CodecSpec::full_scale(CodecId::kState);
  EXPECT_EQ(st.input, (std::array<int, 3>{69, 181, 281}));
  EXPECT_EQ(st.latent, (std::array<int, 3>{256, 32, 32}));
  auto pr = CodecSpec::full_scale(CodecId::kPrecip);
  EXPECT_EQ(pr.input, (std::array<int, 3>{1, 181, 281}));
  EXPECT_EQ(pr.latent, (std::array<int, 3>{16, 32, 32}));
  auto hi = CodecSpec::full_scale(CodecId::kHiresPrecip);
  EXPECT_EQ(hi.input, (std::array<int, 3>{1, 900, 1400}));
  EXPECT_EQ(hi.latent, (std::array<int, 3>{16, 32, 32}));
  // ceil(181 / 4) = 46 >= 32 > ceil(181 / 8) = 23; ceil(900 / 16) = 57 >= 32 > 29.
  EXPECT_EQ(st.n_down(), 2);
  EXPECT_EQ(hi.n_down(), 4);
  EXPECT_EQ(codec_id_from_string(to_string(CodecId::kHiresPrecip)), CodecId::kHiresPrecip);
  EXPECT_THROW(codec_id_from_string("radar"), InvalidArgument);
}

TEST(CodecSpec, ValidationAndJson) {
  auto s = small_spec();
  json j = s;
  auto back = j.get<CodecSpec>();
  EXPECT_EQ(back.fingerprint(), s.fingerprint());
  auto other = s;
  other.widths = {8, 32};
  EXPECT_NE(other.fingerprint(), s.fingerprint());
  auto bad = s;
  bad.latent = {4, 30, 6};
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = s;
  bad.widths.clear();
  EXPECT_THROW(Codec{bad}, InvalidArgument);
}

TEST(Codec, ShapesAndPosterior) {
  Codec c(small_spec());
  auto x = torch::randn({2, 3, 20, 24});
  auto mean_only = c->encode(x);
  EXPECT_EQ(mean_only.mean.sizes(), (std::vector<int64_t>{2, 4, 5, 6}));
  EXPECT_FALSE(mean_only.eps.defined());
  EXPECT_TRUE(torch::equal(mean_only.z, mean_only.mean));
  auto gen = make_generator(1);
  auto sampled = c->encode(x, gen);
  ASSERT_TRUE(sampled.eps.defined());
  EXPECT_TRUE(torch::allclose(sampled.z, sampled.mean + torch::exp(0.5 * sampled.logvar) * sampled.eps));
  EXPECT_TRUE(torch::equal(sampled.resample(), sampled.z));
  EXPECT_TRUE((sampled.logvar >= -30).all().item<bool>());
  EXPECT_TRUE((sampled.logvar <= 20).all().item<bool>());
  EXPECT_EQ(c->decode(sampled).sizes(), x.sizes());
  auto again = c->encode(x, make_generator(1));
  EXPECT_TRUE(torch::equal(again.z, sampled.z));
}

TEST(Codec, RejectsForeignLatentsAndBadShapes) {
  Codec state(small_spec());
  Codec precip(small_spec(CodecId::kPrecip, {1, 20, 24}, {4, 5, 6}));
  auto lp = precip->encode(torch::randn({1, 1, 20, 24}));
  EXPECT_THROW(state->decode(lp), InvalidArgument);
  EXPECT_THROW(state->decode_z(torch::randn({1, 4, 5, 7})), ShapeError);
  EXPECT_THROW(state->encode(torch::randn({1, 2, 20, 24})), ShapeError);
}

TEST(Codec, OddGridRoundTripsShape) {
  Codec c(small_spec(CodecId::kHiresPrecip, {1, 37, 53}, {2, 4, 4}));
  EXPECT_EQ(c->spec.n_down(), 3);
  auto x = torch::randn({1, 1, 37, 53});
  EXPECT_EQ(c->decode(c->encode(x)).sizes(), x.sizes());
}

TEST(Losses, KlMatchesClosedFormLoop) {
  auto gen = make_generator(2);
  auto m = torch::randn({3, 2, 2, 2}, gen, torch::kDouble), lv = torch::randn({3, 2, 2, 2}, gen, torch::kDouble);
  double total = 0;
  auto ma = m.flatten(), la = lv.flatten();
  for (int64_t i = 0; i < ma.numel(); ++i) {
    const double mu = ma[i].item<double>(), s2 = std::exp(la[i].item<double>());
    total += 0.5 * (mu * mu + s2 - 1.0 - std::log(s2));
  }
  EXPECT_NEAR(kl_standard_normal(m, lv).item<double>(), total / 3.0, 1e-12);
  EXPECT_EQ(kl_standard_normal(torch::zeros({2, 3}), torch::zeros({2, 3})).item<float>(), 0.0f);
}

TEST(Losses, GeneratorTotalIsWeightedSum) {
  auto gen = make_generator(3);
  auto x = torch::randn({2, 1, 6, 6}, gen, torch::kDouble), r = torch::randn({2, 1, 6, 6}, gen, torch::kDouble);
  LatentBlock lb;
  lb.mean = torch::randn({2, 2, 3, 3}, gen, torch::kDouble);
  lb.logvar = torch::randn({2, 2, 3, 3}, gen, torch::kDouble) * 0.1;
  auto fake = torch::randn({2, 1, 2, 2}, gen, torch::kDouble);
  auto lp = torch::tensor(0.37, torch::kDouble);
  GenLossWeights w{0.1, 1e-6, 0};
  auto t = generator_loss(x, r, lb, fake, lp, w, 0.8);
  const double mae = (x - r).abs().mean().item<double>();
  const double kl = kl_standard_normal(lb.mean, lb.logvar).item<double>();
  const double expect = mae + 0.1 * 0.37 + 1e-6 * kl - 0.8 * fake.mean().item<double>();
  EXPECT_NEAR(t.total.item<double>(), expect, 1e-12);
  EXPECT_NEAR((t.mae + t.lpips + t.kl + t.adv).item<double>(), t.total.item<double>(), 1e-15);
  EXPECT_NEAR(t.raw_kl, kl, 1e-12);
  auto no_adv = generator_loss(x, r, lb, torch::Tensor(), lp, w, 0.8);
  EXPECT_EQ(no_adv.adv.item<double>(), 0.0);
  auto bad = lb;
  bad.mean = bad.mean.clone();
  bad.mean[0][0][0][0] = INFINITY;
  try {
    generator_loss(x, r, bad, fake, lp, w, 0.8);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'kl'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(generator_loss(x, r, lb, fake, lp, GenLossWeights{-1.0, 0, 0}, 0.8), InvalidArgument);
}

TEST(Losses, HingeAndAdaptiveWeight) {
  auto real = torch::tensor({2.0, 0.5, -1.0}), fake = torch::tensor({-2.0, 0.0, 1.0});
  // relu(1 - real) = {0, 0.5, 2}; relu(1 + fake) = {0, 1, 2}
  EXPECT_NEAR(discriminator_loss(real, fake).item<float>(), 2.5f / 3 + 3.0f / 3, 1e-6);
  EXPECT_EQ(adaptive_psi(3.0, 1.0, true), 0.0);
  EXPECT_NEAR(adaptive_psi(3.0, 1.5, false), 3.0 / (1.5 + 1e-6), 1e-12);
  EXPECT_EQ(adaptive_psi(1.0, 0.0, false), 1e4);
  EXPECT_THROW(discriminator_loss(torch::tensor({NAN}), fake.narrow(0, 0, 1)), NumericalError);
}

TEST(Perceptual, FrozenSeededMetricLikeDistance) {
  PerceptualDistance a(2), b(2);
  auto gen = make_generator(4);
  auto x = torch::randn({2, 2, 16, 16}, gen), y = torch::randn({2, 2, 16, 16}, gen);
  EXPECT_EQ(a(x, x).item<float>(), 0.0f);
  EXPECT_NEAR(a(x, y).item<float>(), a(y, x).item<float>(), 1e-6);
  EXPECT_GT(a(x, y).item<float>(), 0.0f);
  EXPECT_EQ(a(x, y).item<float>(), b(x, y).item<float>());
  for (auto& p : a->parameters()) EXPECT_FALSE(p.requires_grad());
  EXPECT_EQ(PerceptualDistance(2, 99)->parameters().size(), a->parameters().size());
}

TEST(VaeTrainer, ReducesLossAndOnlyTrainsDiscriminatorAfterStart) {
  auto spec = small_spec(CodecId::kPrecip, {1, 16, 16}, {2, 4, 4});
  VaeTrainOptions opt;
  opt.lr = 2e-3;
  opt.seed = 5;
  opt.weights.disc_start = 30;
  opt.disc_width = 8;
  VaeTrainer tr(Codec(spec), opt);
  auto gen = make_generator(6);
  auto x = torch::randn({4, 1, 16, 16}, gen).cumsum(2).cumsum(3) * 0.1;
  const double disc_sum = parameter_checksum(*tr.discriminator());
  double first = 0, last = 0;
  for (int i = 0; i < 40; ++i) {
    auto t = tr.train_step(x);
    if (i == 0) first = t.mae.item<double>();
    if (i == 29) {
      EXPECT_EQ(t.psi, 0.0);
      EXPECT_EQ(parameter_checksum(*tr.discriminator()), disc_sum);
    }
    if (i >= 30) EXPECT_GE(t.psi, 0.0);
    last = t.mae.item<double>();
  }
  EXPECT_NE(parameter_checksum(*tr.discriminator()), disc_sum);
  EXPECT_LT(last, first);
  EXPECT_EQ(tr.step(), 40);
}

TEST(VaeTrainer, ResumeMatchesUninterruptedRun) {
  testkit::TempDir dir;
  auto spec = small_spec(CodecId::kPrecip, {1, 16, 16}, {2, 4, 4});
  VaeTrainOptions opt;
  opt.lr = 1e-3;
  opt.seed = 8;
  opt.weights.disc_start = 2;
  opt.disc_width = 8;
  auto x = torch::randn({2, 1, 16, 16}, make_generator(9));
  Codec base(spec);
  Codec a(spec), b(spec);
  copy_state(*base, *a);
  copy_state(*base, *b);
  VaeTrainer full(a, opt), part(b, opt);
  copy_state(*full.discriminator(), *part.discriminator());
  std::vector<double> losses;
  for (int i = 0; i < 5; ++i) losses.push_back(full.train_step(x).total.item<double>());
  for (int i = 0; i < 3; ++i) part.train_step(x);
  part.save(dir / "vae.ckpt");
  auto resumed = VaeTrainer::resume(dir / "vae.ckpt", opt);
  EXPECT_EQ(resumed.step(), 3);
  for (int i = 3; i < 5; ++i) EXPECT_DOUBLE_EQ(resumed.train_step(x).total.item<double>(), losses[i]);
  EXPECT_EQ(parameter_checksum(*resumed.codec()), parameter_checksum(*full.codec()));
  EXPECT_EQ(parameter_checksum(*resumed.discriminator()), parameter_checksum(*full.discriminator()));
  EXPECT_NO_THROW(load_codec(dir / "vae.ckpt", &spec));
}

TEST(CodecCheckpoint, RoundTripAndSpecCheck) {
  testkit::TempDir dir;
  Codec c(small_spec());
  save_codec(dir / "c.ckpt", c, 12, 3);
  auto back = load_codec(dir / "c.ckpt");
  EXPECT_EQ(parameter_checksum(*back), parameter_checksum(*c));
  auto x = torch::randn({1, 3, 20, 24});
  EXPECT_TRUE(torch::equal(back->encode(x).mean, c->encode(x).mean));
  auto spec = small_spec();
  EXPECT_NO_THROW(load_codec(dir / "c.ckpt", &spec));
  auto other = small_spec(CodecId::kPrecip, {1, 20, 24}, {4, 5, 6});
  EXPECT_THROW(load_codec(dir / "c.ckpt", &other), InvalidArgument);
  EXPECT_THROW(load_codec(dir / "missing.ckpt"), NotFoundError);
}
