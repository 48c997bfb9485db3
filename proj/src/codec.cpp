#include "regcast/codec.hpp"

#include <cmath>
#include <cstdio>

#include "regcast/error.hpp"
#include "regcast/nn_common.hpp"

namespace regcast {

namespace F = torch::nn::functional;

std::string to_string(CodecId id) {
  switch (id) {
    case CodecId::kState: return "state";
    case CodecId::kPrecip: return "precip";
    case CodecId::kHiresPrecip: return "hires_precip";
  }
  return "?";
}

CodecId codec_id_from_string(const std::string& s) {
  if (s == "state") return CodecId::kState;
  if (s == "precip") return CodecId::kPrecip;
  if (s == "hires_precip") return CodecId::kHiresPrecip;
  throw InvalidArgument("unknown codec id '" + s + "'");
}

CodecSpec CodecSpec::full_scale(CodecId id) {
  CodecSpec s;
  s.id = id;
  switch (id) {
    case CodecId::kState: s.input = {69, 181, 281}; s.latent = {256, 32, 32}; break;
    case CodecId::kPrecip: s.input = {1, 181, 281}; s.latent = {16, 32, 32}; break;
    case CodecId::kHiresPrecip: s.input = {1, 900, 1400}; s.latent = {16, 32, 32}; break;
  }
  return s;
}

int CodecSpec::n_down() const {
  int k = 0;
  while (ceil_div(input[1], int64_t(1) << (k + 1)) >= latent[1] &&
         ceil_div(input[2], int64_t(1) << (k + 1)) >= latent[2]) {
    ++k;
  }
  return k;
}

void CodecSpec::validate() const {
  for (int v : input)
    if (v < 1) throw InvalidArgument("codec input dims must be positive");
  for (int v : latent)
    if (v < 1) throw InvalidArgument("codec latent dims must be positive");
  if (latent[1] > input[1] || latent[2] > input[2]) {
    throw InvalidArgument("codec latent grid must not exceed the input grid");
  }
  if (widths.empty()) throw InvalidArgument("codec widths must be non-empty");
  for (int w : widths)
    if (w < 1) throw InvalidArgument("codec widths must be positive");
}

std::string CodecSpec::fingerprint() const {
  auto text = json(*this).dump();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text.data(), text.size())));
  return buf;
}

void to_json(json& j, const CodecSpec& s) {
  j = json{{"id", to_string(s.id)}, {"input", s.input}, {"latent", s.latent}, {"widths", s.widths}};
}

void from_json(const json& j, CodecSpec& s) {
  s.id = codec_id_from_string(j.at("id").get<std::string>());
  j.at("input").get_to(s.input);
  j.at("latent").get_to(s.latent);
  if (j.contains("widths")) j.at("widths").get_to(s.widths);
  s.validate();
}

torch::Tensor LatentBlock::resample() const {
  if (!eps.defined()) return mean;
  return mean + torch::exp(0.5 * logvar) * eps;
}

// ---------------------------------------------------------------------------
// Modules

namespace {

torch::nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::GroupNorm group_norm(int64_t ch) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(ch), ch));
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out) {
  norm1 = register_module("norm1", group_norm(in));
  conv1 = register_module("conv1", conv3(in, out));
  norm2 = register_module("norm2", group_norm(out));
  conv2 = register_module("conv2", conv3(out, out));
  if (in != out) skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1(torch::silu(norm1(x)));
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

CodecImpl::CodecImpl(CodecSpec spec_) : spec(std::move(spec_)) {
  spec.validate();
  const int n = spec.n_down();
  const int64_t C = spec.input[0], Cz = spec.latent[0];
  enc_in = register_module("enc_in", conv3(C, spec.width(0)));
  enc_blocks = register_module("enc_blocks", torch::nn::ModuleList());
  enc_down = register_module("enc_down", torch::nn::ModuleList());
  for (int i = 0; i < n; ++i) {
    enc_blocks->push_back(ResBlock(spec.width(i), spec.width(i)));
    enc_down->push_back(conv3(spec.width(i), spec.width(i + 1), 2));
  }
  enc_mid = register_module("enc_mid", ResBlock(spec.width(n), spec.width(n)));
  enc_norm = register_module("enc_norm", group_norm(spec.width(n)));
  enc_out = register_module("enc_out", conv3(spec.width(n), 2 * Cz));

  dec_in = register_module("dec_in", conv3(Cz, spec.width(n)));
  dec_mid = register_module("dec_mid", ResBlock(spec.width(n), spec.width(n)));
  dec_blocks = register_module("dec_blocks", torch::nn::ModuleList());
  dec_up = register_module("dec_up", torch::nn::ModuleList());
  for (int i = n - 1; i >= 0; --i) {
    dec_up->push_back(conv3(spec.width(i + 1), spec.width(i)));
    dec_blocks->push_back(ResBlock(spec.width(i), spec.width(i)));
  }
  dec_norm = register_module("dec_norm", group_norm(spec.width(0)));
  dec_out = register_module("dec_out", conv3(spec.width(0), C));
}

LatentBlock CodecImpl::encode(const torch::Tensor& x, std::optional<torch::Generator> generator) {
  if (x.dim() != 4 || x.size(1) != spec.input[0] || x.size(2) != spec.input[1] || x.size(3) != spec.input[2]) {
    throw ShapeError("codec " + to_string(spec.id) + " expects [B, " + std::to_string(spec.input[0]) + ", " +
                     std::to_string(spec.input[1]) + ", " + std::to_string(spec.input[2]) + "]");
  }
  auto h = enc_in(x);
  for (size_t i = 0; i < enc_blocks->size(); ++i) {
    h = enc_blocks->at<ResBlockImpl>(i).forward(h);
    h = enc_down->at<torch::nn::Conv2dImpl>(i).forward(h);
  }
  h = torch::silu(enc_norm(enc_mid(h)));
  h = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions({spec.latent[1], spec.latent[2]}));
  auto moments = enc_out(h);
  LatentBlock b;
  b.id = spec.id;
  b.mean = moments.narrow(1, 0, spec.latent[0]);
  b.logvar = moments.narrow(1, spec.latent[0], spec.latent[0]).clamp(-30.0, 20.0);
  if (generator) {
    b.eps = torch::randn(b.mean.sizes(), *generator, b.mean.options());
    b.z = b.resample();
  } else {
    b.z = b.mean;
  }
  return b;
}

torch::Tensor CodecImpl::decode(const LatentBlock& latent) {
  if (latent.id != spec.id) {
    throw InvalidArgument("codec " + to_string(spec.id) + " cannot decode a " + to_string(latent.id) + " latent");
  }
  return decode_z(latent.z);
}

torch::Tensor CodecImpl::decode_z(const torch::Tensor& z) {
  if (z.dim() != 4 || z.size(1) != spec.latent[0] || z.size(2) != spec.latent[1] || z.size(3) != spec.latent[2]) {
    throw ShapeError("codec " + to_string(spec.id) + " latent must be [B, " + std::to_string(spec.latent[0]) + ", " +
                     std::to_string(spec.latent[1]) + ", " + std::to_string(spec.latent[2]) + "]");
  }
  const int n = spec.n_down();
  const int64_t hb = ceil_div(spec.input[1], int64_t(1) << n), wb = ceil_div(spec.input[2], int64_t(1) << n);
  auto bilinear = [](const torch::Tensor& t, int64_t h, int64_t w) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{h, w})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto h = bilinear(dec_in(z), hb, wb);
  h = dec_mid(h);
  for (size_t i = 0; i < dec_blocks->size(); ++i) {
    h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    h = dec_up->at<torch::nn::Conv2dImpl>(i).forward(h);
    h = dec_blocks->at<ResBlockImpl>(i).forward(h);
  }
  if (h.size(2) != spec.input[1] || h.size(3) != spec.input[2]) h = bilinear(h, spec.input[1], spec.input[2]);
  return dec_out(torch::silu(dec_norm(h)));
}

PerceptualDistanceImpl::PerceptualDistanceImpl(int64_t in_channels, std::uint64_t seed) {
  stages = register_module("stages", torch::nn::ModuleList());
  const std::array<std::array<int64_t, 3>, 3> shape{{{in_channels, 16, 1}, {16, 32, 2}, {32, 64, 2}}};
  auto gen = make_generator(seed);
  torch::NoGradGuard guard;
  for (const auto& [in, out, stride] : shape) {
    auto conv = torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
    conv->weight.copy_(torch::randn(conv->weight.sizes(), gen) * std::sqrt(2.0 / double(in * 9)));
    conv->bias.zero_();
    stages->push_back(conv);
  }
  for (auto& p : parameters()) p.set_requires_grad(false);
}

torch::Tensor PerceptualDistanceImpl::forward(const torch::Tensor& x, const torch::Tensor& y) {
  auto fx = x, fy = y;
  torch::Tensor total = torch::zeros({x.size(0)}, x.options());
  for (size_t i = 0; i < stages->size(); ++i) {
    auto& conv = stages->at<torch::nn::Conv2dImpl>(i);
    fx = torch::relu(conv.forward(fx));
    fy = torch::relu(conv.forward(fy));
    auto nx = fx / (fx.pow(2).sum(1, true).sqrt() + 1e-10);
    auto ny = fy / (fy.pow(2).sum(1, true).sqrt() + 1e-10);
    total = total + (nx - ny).pow(2).sum(1).mean({1, 2});
  }
  return total.mean();
}

DiscriminatorImpl::DiscriminatorImpl(int64_t in_channels, int64_t width) {
  auto conv = [](int64_t in, int64_t out, int64_t stride) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(stride).padding(1));
  };
  auto lrelu = torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2));
  net = register_module("net", torch::nn::Sequential(conv(in_channels, width, 2), lrelu,
                                                     conv(width, 2 * width, 2), group_norm(2 * width), lrelu,
                                                     conv(2 * width, 4 * width, 1), group_norm(4 * width), lrelu,
                                                     conv(4 * width, 1, 1)));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) { return net->forward(x); }

// ---------------------------------------------------------------------------
// Losses

void GenLossWeights::validate() const {
  if (!(lambda >= 0.0) || !(gamma >= 0.0)) throw InvalidArgument("loss weights lambda and gamma must be >= 0");
  if (disc_start < 0) throw InvalidArgument("disc_start must be >= 0");
}

torch::Tensor kl_standard_normal(const torch::Tensor& mean, const torch::Tensor& logvar) {
  auto per = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar);
  return per.flatten(1).sum(1).mean();
}

GenLossTerms generator_loss(const torch::Tensor& x, const torch::Tensor& recon, const LatentBlock& latent,
                            const torch::Tensor& fake_score, const torch::Tensor& lpips_value,
                            const GenLossWeights& w, double psi) {
  w.validate();
  if (!(psi >= 0.0) || !std::isfinite(psi)) throw NumericalError("generator loss: psi must be finite and >= 0");
  GenLossTerms t;
  t.psi = psi;
  t.mae = (x - recon).abs().mean();
  auto kl = kl_standard_normal(latent.mean, latent.logvar);
  auto lp = lpips_value.defined() ? lpips_value : torch::zeros({}, x.options());
  auto adv = fake_score.defined() ? -fake_score.mean() : torch::zeros({}, x.options());
  for (auto [name, v] : {std::pair{"mae", t.mae}, {"lpips", lp}, {"kl", kl}, {"adv", adv}}) {
    if (!torch::isfinite(v).all().item<bool>()) {
      throw NumericalError(std::string("generator loss component '") + name + "' is not finite");
    }
  }
  t.raw_kl = kl.item<double>();
  t.raw_lpips = lp.item<double>();
  t.lpips = w.lambda * lp;
  t.kl = w.gamma * kl;
  t.adv = psi * adv;
  t.total = t.mae + t.lpips + t.kl + t.adv;
  return t;
}

torch::Tensor discriminator_loss(const torch::Tensor& real_score, const torch::Tensor& fake_score) {
  if (!torch::isfinite(real_score).all().item<bool>() || !torch::isfinite(fake_score).all().item<bool>()) {
    throw NumericalError("discriminator scores are not finite");
  }
  return torch::relu(1.0 - real_score).mean() + torch::relu(1.0 + fake_score).mean();
}

double adaptive_psi(double grad_norm_rec, double grad_norm_adv, bool warmup) {
  if (warmup) return 0.0;
  return std::clamp(grad_norm_rec / (grad_norm_adv + 1e-6), 0.0, 1e4);
}

// ---------------------------------------------------------------------------
// Training

VaeTrainer::VaeTrainer(Codec codec, VaeTrainOptions opt)
    : codec_(std::move(codec)),
      disc_(Discriminator(codec_->spec.input[0], opt.disc_width)),
      lpips_(PerceptualDistance(codec_->spec.input[0])),
      opt_(opt) {
  opt_.weights.validate();
  opt_g_ = std::make_unique<torch::optim::Adam>(codec_->parameters(), torch::optim::AdamOptions(opt_.lr));
  opt_d_ = std::make_unique<torch::optim::Adam>(disc_->parameters(), torch::optim::AdamOptions(opt_.disc_lr));
}

GenLossTerms VaeTrainer::train_step(const torch::Tensor& x) {
  codec_->train();
  const bool warmup = step_ < opt_.weights.disc_start;
  auto latent = codec_->encode(x, make_generator(step_seed(opt_.seed, step_)));
  auto recon = codec_->decode(latent);
  auto lp = lpips_(x, recon);

  torch::Tensor fake;
  double psi = 0.0;
  if (!warmup) {
    fake = disc_(recon);
    auto rec = (x - recon).abs().mean() + opt_.weights.lambda * lp;
    auto last = codec_->last_layer_weight();
    auto g_rec = torch::autograd::grad({rec}, {last}, {}, /*retain_graph=*/true)[0].norm().item<double>();
    auto g_adv = torch::autograd::grad({-fake.mean()}, {last}, {}, /*retain_graph=*/true)[0].norm().item<double>();
    psi = adaptive_psi(g_rec, g_adv, false);
  }
  auto terms = generator_loss(x, recon, latent, fake, lp, opt_.weights, psi);
  opt_g_->zero_grad();
  terms.total.backward();
  opt_g_->step();

  if (!warmup) {
    opt_d_->zero_grad();
    auto dl = discriminator_loss(disc_(x.detach()), disc_(recon.detach()));
    dl.backward();
    opt_d_->step();
    terms.disc = dl.item<double>();
  }
  ++step_;
  return terms;
}

void VaeTrainer::save(const std::filesystem::path& path) const {
  CheckpointInfo info;
  info.fingerprint = codec_->spec.fingerprint();
  info.config = codec_->spec;
  info.step = step_;
  info.seed = opt_.seed;
  info.extra = {{"codec", to_string(codec_->spec.id)}, {"disc_width", opt_.disc_width}};
  Discriminator disc = disc_;
  CheckpointExtras extras;
  extras.modules = {{"disc", disc.get()}};
  extras.optimizers = {{"generator", opt_g_.get()}, {"discriminator", opt_d_.get()}};
  save_checkpoint(path, kCodecCheckpointKind, *codec_, info, nullptr, extras);
}

VaeTrainer VaeTrainer::resume(const std::filesystem::path& path, VaeTrainOptions opt) {
  auto info = read_checkpoint_info(path, kCodecCheckpointKind);
  auto spec = info.config.get<CodecSpec>();
  opt.disc_width = info.extra.value("disc_width", opt.disc_width);
  VaeTrainer t(Codec(spec), opt);
  CheckpointExtras extras;
  extras.modules = {{"disc", t.disc_.get()}};
  extras.optimizers = {{"generator", t.opt_g_.get()}, {"discriminator", t.opt_d_.get()}};
  info = load_checkpoint(path, kCodecCheckpointKind, *t.codec_, spec.fingerprint(), nullptr, extras);
  t.step_ = info.step;
  return t;
}

void save_codec(const std::filesystem::path& path, const Codec& codec, std::int64_t step, std::uint64_t seed) {
  CheckpointInfo info;
  info.fingerprint = codec->spec.fingerprint();
  info.config = codec->spec;
  info.step = step;
  info.seed = seed;
  info.extra = {{"codec", to_string(codec->spec.id)}};
  save_checkpoint(path, kCodecCheckpointKind, *codec, info);
}

Codec load_codec(const std::filesystem::path& path, const CodecSpec* expected) {
  auto info = read_checkpoint_info(path, kCodecCheckpointKind);
  auto spec = info.config.get<CodecSpec>();
  if (expected && expected->fingerprint() != spec.fingerprint()) {
    throw InvalidArgument("codec checkpoint " + path.string() + " holds " + to_string(spec.id) +
                          " spec " + spec.fingerprint() + ", expected " + expected->fingerprint());
  }
  Codec codec(spec);
  load_checkpoint(path, kCodecCheckpointKind, *codec, spec.fingerprint());
  codec->eval();
  return codec;
}

}  // namespace regcast
