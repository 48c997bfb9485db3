#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "regcast/diffusion.hpp"
#include "regcast/error.hpp"
#include "regcast/nn_common.hpp"
#include "test_support.hpp"

using namespace regcast;

namespace {

DiTConfig tiny_dit() {
  DiTConfig c;
  c.latent_channels = 2;
  c.cond_channels = {3, 2, 2};
  c.latent_h = 4;
  c.latent_w = 4;
  c.patch = 2;
  c.width = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}

void randomize(torch::nn::Module& m, double std, uint64_t seed) {
  torch::NoGradGuard g;
  auto gen = make_generator(seed);
  for (auto& p : m.parameters()) p.copy_(torch::randn(p.sizes(), gen, p.options()) * std);
}

/// Reverse-process oracle written from the Gaussian product form of the
/// posterior, over the unrespaced schedule.
torch::Tensor reference_sampler(DiT& model, const torch::Tensor& cond, const std::vector<double>& betas,
                                uint64_t seed) {
  const int T = int(betas.size());
  std::vector<double> ab(T + 1, 1.0);
  for (int t = 1; t <= T; ++t) ab[t] = ab[t - 1] * (1.0 - betas[t - 1]);
  auto gen = make_generator(seed);
  torch::NoGradGuard guard;
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  const auto& c = model->cfg;
  auto x = torch::randn({cond.size(0), c.latent_channels, c.latent_h, c.latent_w}, gen, opts);
  for (int t = T; t >= 1; --t) {
    auto out = model->forward(x, cond, torch::full({cond.size(0)}, t, torch::kLong));
    const double a = 1.0 - betas[t - 1];
    auto x0 = (x - std::sqrt(1.0 - ab[t]) * out.eps) / std::sqrt(ab[t]);
    // q(x_{t-1} | x_t, x0) ∝ N(x_t; sqrt(a) x_{t-1}, beta) N(x_{t-1}; sqrt(ab_{t-1}) x0, 1 - ab_{t-1})
    const double prec = 1.0 / betas[t - 1] * a + (t > 1 ? 1.0 / (1.0 - ab[t - 1]) : 0.0);
    torch::Tensor mean;
    if (t > 1) {
      mean = (std::sqrt(a) / betas[t - 1] * x + std::sqrt(ab[t - 1]) / (1.0 - ab[t - 1]) * x0) / prec;
    } else {
      mean = x0;
    }
    auto var = [&](int s) { return betas[s - 1] * (1.0 - ab[s - 1]) / (1.0 - ab[s]); };
    const double min_log = std::log(t > 1 ? var(t) : var(2));
    const double max_log = std::log(betas[t - 1]);
    auto frac = (out.v + 1.0) / 2.0;
    auto logvar = frac * max_log + (1.0 - frac) * min_log;
    if (t > 1) {
      x = mean + torch::exp(0.5 * logvar) * torch::randn(x.sizes(), gen, opts);
    } else {
      x = mean;
    }
  }
  return x;
}

}  // namespace

TEST(NoiseSchedule, LinearEndpointsAndCumulativeProduct) {
  auto s = NoiseSchedule::linear(1000);
  EXPECT_EQ(s.T(), 1000);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 1.0);
  double log_ab = 0.0;
  for (int t = 1; t <= 1000; ++t) {
    log_ab += std::log1p(-s.beta(t));
    EXPECT_NEAR(s.alpha_bar(t), std::exp(log_ab), 1e-12);
    if (t > 1) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  }
  EXPECT_THROW(s.beta(0), InvalidArgument);
  EXPECT_THROW(s.beta(1001), InvalidArgument);
  EXPECT_THROW(NoiseSchedule::linear(0), InvalidArgument);
}

TEST(NoiseSchedule, PosteriorMatchesGaussianProduct) {
  auto s = NoiseSchedule::linear(50);
  for (int t = 2; t <= 50; ++t) {
    const double b = s.beta(t), a = 1 - b, abp = s.alpha_bar(t - 1);
    const double prec = a / b + 1.0 / (1.0 - abp);
    EXPECT_NEAR(s.posterior_variance(t), 1.0 / prec, 1e-14);
    EXPECT_NEAR(s.posterior_coef_xt(t), std::sqrt(a) / b / prec, 1e-12);
    EXPECT_NEAR(s.posterior_coef_x0(t), std::sqrt(abp) / (1.0 - abp) / prec, 1e-12);
    EXPECT_DOUBLE_EQ(s.posterior_log_variance_clipped(t), std::log(s.posterior_variance(t)));
  }
  EXPECT_DOUBLE_EQ(s.posterior_variance(1), 0.0);
  EXPECT_DOUBLE_EQ(s.posterior_log_variance_clipped(1), std::log(s.posterior_variance(2)));
}

TEST(NoiseSchedule, QSampleMonteCarloMoments) {
  auto s = NoiseSchedule::linear(1000);
  auto gen = make_generator(7);
  const int64_t n = 200000;
  auto x0 = torch::full({n, 1}, 1.5, torch::kDouble);
  for (int t : {1, 10, 250, 1000}) {
    auto eps = torch::randn({n, 1}, gen, torch::kDouble);
    auto xt = s.q_sample(x0, torch::full({n}, t, torch::kLong), eps);
    const double m = xt.mean().item<double>(), v = xt.var().item<double>();
    const double em = std::sqrt(s.alpha_bar(t)) * 1.5, ev = 1.0 - s.alpha_bar(t);
    EXPECT_NEAR(m, em, 5.0 * std::sqrt(ev / n)) << "t=" << t;
    EXPECT_NEAR(v, ev, 5.0 * ev * std::sqrt(2.0 / n)) << "t=" << t;
    EXPECT_TRUE(torch::allclose(s.q_sample(x0, t, eps), xt, 0, 1e-15));
  }
  EXPECT_THROW(s.q_sample(x0, torch::full({n}, 0, torch::kLong), x0), InvalidArgument);
  EXPECT_THROW(s.q_sample(x0, torch::full({n}, 1001, torch::kLong), x0), InvalidArgument);
  EXPECT_TRUE(torch::equal(s.q_sample(x0, 0, x0), x0));
}

TEST(NoiseSchedule, FullRespacingIsBitIdentical) {
  auto s = NoiseSchedule::linear(10);
  auto r = s.respaced(10);
  EXPECT_EQ(r.betas(), s.betas());
  EXPECT_EQ(r.alpha_bars(), s.alpha_bars());
  for (int t = 1; t <= 10; ++t) {
    EXPECT_EQ(r.original_step(t), t);
    EXPECT_EQ(r.posterior_coef_x0(t), s.posterior_coef_x0(t));
    EXPECT_EQ(r.posterior_coef_xt(t), s.posterior_coef_xt(t));
    EXPECT_EQ(r.posterior_log_variance_clipped(t), s.posterior_log_variance_clipped(t));
  }
}

TEST(NoiseSchedule, RespacingKeepsAlphaBars) {
  auto s = NoiseSchedule::linear(1000);
  for (int n : {1, 2, 50, 250, 999}) {
    auto r = s.respaced(n);
    ASSERT_EQ(r.T(), n);
    EXPECT_EQ(r.original_step(n), 1000);
    if (n > 1) EXPECT_EQ(r.original_step(1), 1);
    for (int t = 1; t <= n; ++t) {
      EXPECT_NEAR(r.alpha_bar(t), s.alpha_bar(r.original_step(t)), 1e-12 * s.alpha_bar(r.original_step(t)) + 1e-15);
      if (t > 1) EXPECT_GT(r.original_step(t), r.original_step(t - 1));
    }
  }
  EXPECT_THROW(s.respaced(0), InvalidArgument);
  EXPECT_THROW(s.respaced(1001), InvalidArgument);
}

TEST(DiT, ZeroInitOutputsAndShapes) {
  DiT m(tiny_dit());
  auto x = torch::randn({3, 2, 4, 4});
  auto c = torch::randn({3, 7, 4, 4});
  auto out = m->forward(x, c, torch::tensor({1, 500, 1000}, torch::kLong));
  EXPECT_EQ(out.eps.sizes(), x.sizes());
  EXPECT_EQ(out.v.sizes(), x.sizes());
  EXPECT_EQ(out.eps.abs().max().item<float>(), 0.0f);
  EXPECT_EQ(out.v.abs().max().item<float>(), 0.0f);
  EXPECT_THROW(m->forward(torch::randn({3, 2, 4, 5}), c, torch::ones({3}, torch::kLong)), ShapeError);
  EXPECT_THROW(m->forward(x, torch::randn({3, 6, 4, 4}), torch::ones({3}, torch::kLong)), ShapeError);
  EXPECT_THROW(m->forward(x, c, torch::ones({2}, torch::kLong)), ShapeError);
}

TEST(DiT, PatchifyRoundTripsThroughIdentityBlocks) {
  // With zero-initialized blocks and identity embed/projection, the output is
  // the layer-normalized patch tokens put back on the latent grid.
  auto cfg = tiny_dit();
  cfg.width = 8;
  cfg.cond_channels = {0};
  DiT m(cfg);
  torch::NoGradGuard g;
  const int64_t in = 2 * 4;  // channels * patch^2
  m->patch_embed->weight.zero_();
  m->patch_embed->bias.zero_();
  m->patch_embed->weight.narrow(0, 0, in).copy_(torch::eye(in));
  m->pos_embed.zero_();
  m->final_proj->weight.zero_();
  // Token feature order is (channel, dy, dx); output is (2C, dy, dx) with eps first.
  m->final_proj->weight.narrow(0, 0, in).narrow(1, 0, in).copy_(torch::eye(in));
  m->check_finite_values = false;
  auto x = torch::randn({2, 2, 4, 4});
  // final_norm standardizes tokens, so compare against the standardized tokens.
  auto out = m->forward(x, torch::zeros({2, 0, 4, 4}), torch::ones({2}, torch::kLong));
  auto tok = x.view({2, 2, 2, 2, 2, 2}).permute({0, 2, 4, 1, 3, 5}).reshape({2, 4, 8});
  auto mu = tok.mean(-1, true);
  auto var = tok.var(-1, false, true);
  auto normed = (tok - mu) / (var + 1e-6).sqrt();
  auto expect = normed.view({2, 2, 2, 2, 2, 2}).permute({0, 3, 1, 4, 2, 5}).reshape({2, 2, 4, 4});
  EXPECT_TRUE(torch::allclose(out.eps, expect, 1e-5, 1e-5));
}

TEST(DiT, BlockFiniteCheckNamesBlock) {
  DiT m(tiny_dit());
  randomize(*m, 0.3, 1);
  {
    torch::NoGradGuard g;
    m->blocks->at<DiTBlockImpl>(0).fc2->bias.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  try {
    m->forward(torch::randn({1, 2, 4, 4}), torch::randn({1, 7, 4, 4}), torch::ones({1}, torch::kLong));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("dit.block0"), std::string::npos) << e.what();
  }
}

TEST(DiT, GradientCheck) {
  DiT m(tiny_dit());
  m->to(torch::kDouble);
  randomize(*m, 0.3, 2);
  auto gen = make_generator(3);
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto x0 = torch::randn({2, 2, 4, 4}, gen, opts);
  auto cond = torch::randn({2, 7, 4, 4}, gen, opts);
  auto eps = torch::randn({2, 2, 4, 4}, gen, opts);
  auto s = NoiseSchedule::linear(20);
  (void)x0;
  auto t = torch::tensor({1, 13}, torch::kLong);
  auto xt = s.q_sample(x0, t, eps);
  // The vb term stops gradients through eps on purpose, so the check uses a
  // loss that is differentiable in both outputs.
  auto w = torch::randn({2, 2, 4, 4}, gen, opts);
  auto r = testkit::grad_check(*m, [&] {
    auto out = m->forward(xt, cond, t);
    return (out.eps - eps).pow(2).mean() + (out.v * w).sum();
  });
  EXPECT_GT(r.checked, 1000);
  EXPECT_GE(r.pass_fraction(), 0.99) << r.worst_name << " rel " << r.worst_rel;
}

TEST(DiffusionLoss, NormalKlClosedForm) {
  auto m1 = torch::tensor({{0.3, -1.0}}, torch::kDouble), lv1 = torch::tensor({{-0.5, 0.2}}, torch::kDouble);
  auto m2 = torch::tensor({{0.1, 0.5}}, torch::kDouble), lv2 = torch::tensor({{0.4, -0.3}}, torch::kDouble);
  double expect = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double s1 = std::exp(lv1[0][i].item<double>()), s2 = std::exp(lv2[0][i].item<double>());
    const double d = m1[0][i].item<double>() - m2[0][i].item<double>();
    expect += 0.5 * std::log(s2 / s1) + (s1 + d * d) / (2 * s2) - 0.5;
  }
  EXPECT_NEAR(normal_kl(m1, lv1, m2, lv2).item<double>(), expect / 2, 1e-14);
  EXPECT_NEAR(normal_kl(m1, lv1, m1, lv1).item<double>(), 0.0, 1e-15);
}

TEST(DiffusionLoss, PerfectPredictionHasZeroMseAndKl) {
  auto s = NoiseSchedule::linear(100);
  auto gen = make_generator(4);
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto x0 = torch::randn({4, 2, 3, 3}, gen, opts);
  auto eps = torch::randn({4, 2, 3, 3}, gen, opts);
  auto t = torch::tensor({2, 10, 50, 100}, torch::kLong);
  auto xt = s.q_sample(x0, t, eps);
  auto l = diffusion_loss(s, x0, xt, t, eps, {eps, -torch::ones_like(eps)});
  EXPECT_NEAR(l.mse.item<double>(), 0.0, 1e-20);
  EXPECT_NEAR(l.vb.item<double>(), 0.0, 1e-9);
  // Variance output only moves vb; the detached mean keeps mse unaffected.
  auto v = torch::zeros_like(eps).requires_grad_(true);
  auto e = eps.clone().requires_grad_(true);
  auto l2 = diffusion_loss(s, x0, xt, t, eps, {e, v});
  EXPECT_GT(l2.vb.item<double>(), 0.0);
  l2.vb.backward();
  EXPECT_FALSE(e.grad().defined() && e.grad().abs().max().item<double>() > 0);
  EXPECT_GT(v.grad().abs().max().item<double>(), 0.0);
}

TEST(Sampling, FullRespacingMatchesReferenceSampler) {
  auto cfg = tiny_dit();
  DiT m(cfg);
  m->to(torch::kDouble);
  randomize(*m, 0.2, 5);
  m->eval();
  auto cond = torch::randn({2, 7, 4, 4}, make_generator(6), torch::TensorOptions().dtype(torch::kDouble));
  auto s = NoiseSchedule::linear(10, 1e-2, 0.2);
  auto a = sample(m, cond, s, 10, 77);
  auto b = reference_sampler(m, cond, s.betas(), 77);
  EXPECT_LT((a - b).abs().max().item<double>(), 1e-10);
}

TEST(Sampling, DeterministicPerSeed) {
  DiT m(tiny_dit());
  randomize(*m, 0.2, 8);
  auto cond = torch::randn({1, 7, 4, 4});
  auto s = NoiseSchedule::linear(100);
  auto a = sample(m, cond, s, 25, 1);
  auto b = sample(m, cond, s, 25, 1);
  auto c = sample(m, cond, s, 25, 2);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_FALSE(torch::equal(a, c));
  EXPECT_TRUE(torch::isfinite(a).all().item<bool>());
}

TEST(Ensemble, EnMaxMatchesElementwiseLoop) {
  auto gen = make_generator(9);
  std::vector<torch::Tensor> ms;
  for (int i = 0; i < 4; ++i) ms.push_back(torch::randn({2, 5, 6}, gen));
  auto out = enmax(ms);
  auto fo = out.flatten();
  for (int64_t k = 0; k < fo.numel(); ++k) {
    float best = -INFINITY;
    for (auto& m : ms) best = std::max(best, m.flatten()[k].item<float>());
    ASSERT_EQ(fo[k].item<float>(), best);
  }
  EXPECT_TRUE(torch::equal(enmax({ms[0]}), ms[0]));
  EXPECT_THROW(enmax({}), InvalidArgument);
  EXPECT_THROW(enmax({ms[0], torch::zeros({2, 5, 5})}), ShapeError);
}

TEST(Ensemble, MemberSeedsDiffer) {
  std::set<uint64_t> seen;
  for (int m = 0; m < 64; ++m) seen.insert(member_seed(42, m));
  EXPECT_EQ(seen.size(), 64u);
  EXPECT_EQ(member_seed(42, 3), member_seed(42, 3));
  EXPECT_NE(member_seed(42, 0), member_seed(43, 0));
}

TEST(DiffusionTrainer, OverfitsFixedBatch) {
  auto cfg = tiny_dit();
  DiT m(cfg);
  DiffusionTrainer tr(m, NoiseSchedule::linear(50), {1e-3, 0.0, 4, 11});
  auto gen = make_generator(12);
  auto cond = torch::randn({4, 7, 4, 4}, gen);
  auto z0 = torch::randn({4, 2, 4, 4}, gen);
  double first = 0, last = 0;
  for (int i = 0; i < 300; ++i) {
    auto l = tr.train_step(cond, z0);
    if (i < 20) first += l.mse.item<double>();
    if (i >= 280) last += l.mse.item<double>();
  }
  EXPECT_EQ(tr.step(), 300);
  EXPECT_LT(last, 0.8 * first);
}

TEST(DiffusionTrainer, ResumeMatchesUninterruptedRun) {
  testkit::TempDir dir;
  auto gen = make_generator(14);
  auto cond = torch::randn({4, 7, 4, 4}, gen);
  auto z0 = torch::randn({4, 2, 4, 4}, gen);
  DiffusionTrainOptions opt{1e-3, 0.0, 4, 15};
  DiT base(tiny_dit());
  randomize(*base, 0.05, 16);
  DiT a(tiny_dit()), b(tiny_dit());
  copy_state(*base, *a);
  copy_state(*base, *b);
  DiffusionTrainer full(a, NoiseSchedule::linear(50), opt);
  std::vector<double> losses;
  for (int i = 0; i < 6; ++i) losses.push_back(full.train_step(cond, z0).total.item<double>());
  DiffusionTrainer part(b, NoiseSchedule::linear(50), opt);
  for (int i = 0; i < 3; ++i) part.train_step(cond, z0);
  part.save(dir / "dit.ckpt", {0.5, 1.0, 2.0});
  auto r = DiffusionTrainer::resume(dir / "dit.ckpt", opt);
  EXPECT_EQ(r.trainer.step(), 3);
  EXPECT_EQ(r.trainer.schedule().T(), 50);
  EXPECT_DOUBLE_EQ(r.scales.hires, 2.0);
  for (int i = 3; i < 6; ++i) EXPECT_DOUBLE_EQ(r.trainer.train_step(cond, z0).total.item<double>(), losses[i]);
  EXPECT_EQ(parameter_checksum(*r.trainer.model()), parameter_checksum(*full.model()));
  EXPECT_EQ(load_dit(dir / "dit.ckpt").T, 50);
}

TEST(DiTCheckpoint, RoundTrip) {
  testkit::TempDir dir;
  DiT m(tiny_dit());
  randomize(*m, 0.1, 13);
  save_dit(dir / "dit.ckpt", m, {0.5, 2.0, 3.0}, 250, 17, 99);
  auto l = load_dit(dir / "dit.ckpt");
  EXPECT_EQ(l.T, 250);
  EXPECT_DOUBLE_EQ(l.scales.precip, 2.0);
  EXPECT_DOUBLE_EQ(l.scales.hires, 3.0);
  EXPECT_EQ(l.model->cfg.fingerprint(), m->cfg.fingerprint());
  EXPECT_EQ(parameter_checksum(*l.model), parameter_checksum(*m));
  EXPECT_THROW(load_dit(dir / "missing.ckpt"), Error);
}

namespace {

Diagnoser tiny_diagnoser() {
  auto spec = [](CodecId id, std::array<int, 3> in, std::array<int, 3> lat) {
    CodecSpec s;
    s.id = id;
    s.input = in;
    s.latent = lat;
    s.widths = {4, 8};
    return s;
  };
  Diagnoser d;
  d.state_codec = Codec(spec(CodecId::kState, {3, 16, 16}, {3, 4, 4}));
  d.precip_codec = Codec(spec(CodecId::kPrecip, {1, 16, 16}, {2, 4, 4}));
  d.hires_codec = Codec(spec(CodecId::kHiresPrecip, {1, 32, 32}, {2, 4, 4}));
  d.dit = DiT(tiny_dit());
  randomize(*d.dit, 0.1, 14);
  d.scales = {1.0, 1.0, 1.0};
  d.state_stats.names = {"a", "b", "c"};
  d.state_stats.mean = {0, 1, 2};
  d.state_stats.std = {1, 2, 3};
  d.hires_dbz_mean = 10.0;
  d.hires_dbz_std = 5.0;
  d.T = 20;
  return d;
}

}  // namespace

TEST(Diagnoser, EnsembleShapeDeterminismAndFrozenCodecs) {
  auto d = tiny_diagnoser();
  auto gen = make_generator(15);
  auto state = torch::randn({1, 3, 16, 16}, gen);
  auto precip = torch::rand({1, 16, 16}, gen) * 5;
  auto hires = torch::rand({1, 32, 32}, gen) * 5;
  const double sums[3] = {parameter_checksum(*d.state_codec), parameter_checksum(*d.precip_codec),
                          parameter_checksum(*d.hires_codec)};
  std::vector<torch::Tensor> members;
  auto out = d.diagnose(state, precip, hires, 3, 5, 10, &members);
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{1, 32, 32}));
  ASSERT_EQ(members.size(), 3u);
  EXPECT_TRUE(torch::equal(out, enmax(members)));
  EXPECT_TRUE((out >= 0).all().item<bool>());
  EXPECT_FALSE(torch::equal(members[0], members[1]));
  EXPECT_TRUE(torch::equal(out, d.diagnose(state, precip, hires, 3, 5, 10)));
  EXPECT_EQ(sums[0], parameter_checksum(*d.state_codec));
  EXPECT_EQ(sums[1], parameter_checksum(*d.precip_codec));
  EXPECT_EQ(sums[2], parameter_checksum(*d.hires_codec));
  EXPECT_THROW(d.diagnose(state, precip, hires, 0, 5, 10), InvalidArgument);
}

TEST(Diagnoser, ValidateRejectsMismatchedParts) {
  auto d = tiny_diagnoser();
  EXPECT_NO_THROW(d.validate());
  auto swapped = d;
  std::swap(swapped.precip_codec, swapped.hires_codec);
  EXPECT_THROW(swapped.validate(), InvalidArgument);
  auto wrong = d;
  auto cfg = tiny_dit();
  cfg.cond_channels = {3, 2, 3};
  wrong.dit = DiT(cfg);
  EXPECT_THROW(wrong.validate(), ShapeError);
  auto missing = d;
  missing.dit = nullptr;
  EXPECT_THROW(missing.validate(), InvalidArgument);
}
