#include "regcast/diffusion.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "regcast/error.hpp"
#include "regcast/nn_common.hpp"

namespace regcast {

// ---------------------------------------------------------------------------
// Schedule

NoiseSchedule NoiseSchedule::linear(int T, double beta_1, double beta_T) {
  if (T < 1) throw InvalidArgument("diffusion T must be >= 1");
  if (!(0.0 < beta_1 && beta_1 <= beta_T && beta_T < 1.0)) {
    throw InvalidArgument("betas must satisfy 0 < beta_1 <= beta_T < 1");
  }
  NoiseSchedule s;
  s.betas_.resize(T);
  s.original_.resize(T);
  for (int i = 0; i < T; ++i) {
    s.betas_[i] = T == 1 ? beta_1 : beta_1 + (beta_T - beta_1) * double(i) / double(T - 1);
    s.original_[i] = i + 1;
  }
  s.finalize();
  return s;
}

NoiseSchedule NoiseSchedule::respaced(int n_steps) const {
  if (n_steps < 1 || n_steps > T()) {
    throw InvalidArgument("n_steps must be in [1, " + std::to_string(T()) + "] (got " + std::to_string(n_steps) + ")");
  }
  std::vector<int> keep;
  if (n_steps == 1) {
    keep.push_back(T() - 1);
  } else {
    const double stride = double(T() - 1) / double(n_steps - 1);
    for (int i = 0; i < n_steps; ++i) keep.push_back(int(std::lround(i * stride)));
  }
  NoiseSchedule s;
  int prev = -1;
  double last_ab = 1.0;
  for (int idx : keep) {
    s.betas_.push_back(idx == prev + 1 ? betas_[idx] : 1.0 - alpha_bars_[idx] / last_ab);
    s.original_.push_back(original_[idx]);
    last_ab = alpha_bars_[idx];
    prev = idx;
  }
  s.finalize();
  return s;
}

void NoiseSchedule::finalize() {
  const int n = T();
  alpha_bars_.resize(n);
  double ab = 1.0;
  for (int i = 0; i < n; ++i) alpha_bars_[i] = ab *= (1.0 - betas_[i]);
  post_var_.resize(n);
  coef_x0_.resize(n);
  coef_xt_.resize(n);
  log_betas_.resize(n);
  post_logvar_clipped_.resize(n);
  for (int i = 0; i < n; ++i) {
    const double ab_prev = i == 0 ? 1.0 : alpha_bars_[i - 1];
    const double b = betas_[i];
    post_var_[i] = b * (1.0 - ab_prev) / (1.0 - alpha_bars_[i]);
    coef_x0_[i] = b * std::sqrt(ab_prev) / (1.0 - alpha_bars_[i]);
    coef_xt_[i] = (1.0 - ab_prev) * std::sqrt(1.0 - b) / (1.0 - alpha_bars_[i]);
    log_betas_[i] = std::log(b);
  }
  for (int i = 0; i < n; ++i) {
    post_logvar_clipped_[i] = i == 0 ? (n > 1 ? std::log(post_var_[1]) : log_betas_[0]) : std::log(post_var_[i]);
  }
}

void NoiseSchedule::check(int t) const {
  if (t < 1 || t > T()) {
    throw InvalidArgument("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(T()) + "]");
  }
}

double NoiseSchedule::beta(int t) const { check(t); return betas_[t - 1]; }
double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  check(t);
  return alpha_bars_[t - 1];
}
int NoiseSchedule::original_step(int t) const { check(t); return original_[t - 1]; }
double NoiseSchedule::posterior_variance(int t) const { check(t); return post_var_[t - 1]; }
double NoiseSchedule::posterior_log_variance_clipped(int t) const { check(t); return post_logvar_clipped_[t - 1]; }
double NoiseSchedule::posterior_coef_x0(int t) const { check(t); return coef_x0_[t - 1]; }
double NoiseSchedule::posterior_coef_xt(int t) const { check(t); return coef_xt_[t - 1]; }

torch::Tensor NoiseSchedule::gather(const std::vector<double>& values, const torch::Tensor& t,
                                    const torch::Tensor& like) const {
  auto tl = t.to(torch::kLong);
  if ((tl < 1).any().item<bool>() || (tl > T()).any().item<bool>()) {
    throw InvalidArgument("diffusion step outside [1, " + std::to_string(T()) + "]");
  }
  auto table = torch::tensor(values, torch::kDouble);
  std::vector<int64_t> shape(like.dim(), 1);
  shape[0] = tl.size(0);
  return table.index_select(0, tl - 1).to(like.scalar_type()).view(shape);
}

torch::Tensor NoiseSchedule::q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps) const {
  auto ab = gather(alpha_bars_, t, x0);
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor NoiseSchedule::q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps) const {
  const double ab = alpha_bar(t);
  if (t == 0) return x0;
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

// ---------------------------------------------------------------------------
// Denoiser

int DiTConfig::in_channels() const {
  int c = latent_channels;
  for (int v : cond_channels) c += v;
  return c;
}

void DiTConfig::validate() const {
  if (latent_channels < 1 || patch < 1 || width < 1 || depth < 1 || heads < 1) {
    throw InvalidArgument("DiT sizes must be positive");
  }
  if (latent_h % patch || latent_w % patch) throw InvalidArgument("latent grid must be divisible by the patch size");
  if (width % heads) throw InvalidArgument("DiT width must be divisible by the head count");
  if (width % 4) throw InvalidArgument("DiT width must be divisible by 4 (2D position table)");
  for (int c : cond_channels)
    if (c < 0) throw InvalidArgument("conditioning channels must be >= 0");
}

std::string DiTConfig::fingerprint() const {
  auto text = json(*this).dump();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text.data(), text.size())));
  return buf;
}

void to_json(json& j, const DiTConfig& c) {
  j = json{{"latent_channels", c.latent_channels}, {"cond_channels", c.cond_channels}, {"latent_h", c.latent_h},
           {"latent_w", c.latent_w}, {"patch", c.patch}, {"width", c.width}, {"depth", c.depth},
           {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const json& j, DiTConfig& c) {
  auto take = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  take("latent_channels", c.latent_channels);
  take("cond_channels", c.cond_channels);
  take("latent_h", c.latent_h);
  take("latent_w", c.latent_w);
  take("patch", c.patch);
  take("width", c.width);
  take("depth", c.depth);
  take("heads", c.heads);
  take("mlp_ratio", c.mlp_ratio);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, double max_period) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(max_period) * torch::arange(half, torch::kDouble) / double(half));
  auto args = t.to(torch::kDouble).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, emb.options())}, 1);
  return emb;
}

torch::Tensor sincos_pos_embed_2d(int64_t dim, int64_t h, int64_t w) {
  auto axis = [&](const torch::Tensor& pos) {  // [N] -> [N, dim / 2]
    const int64_t q = dim / 4;
    auto omega = 1.0 / torch::pow(10000.0, torch::arange(q, torch::kDouble) / double(q));
    auto out = pos.to(torch::kDouble).unsqueeze(1) * omega.unsqueeze(0);
    return torch::cat({torch::sin(out), torch::cos(out)}, 1);
  };
  auto grid = torch::meshgrid({torch::arange(h), torch::arange(w)}, "ij");
  return torch::cat({axis(grid[0].flatten()), axis(grid[1].flatten())}, 1).to(torch::kFloat32);
}

SelfAttentionImpl::SelfAttentionImpl(int64_t dim, int64_t heads_) : heads(heads_) {
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
  const int64_t B = x.size(0), N = x.size(1), D = x.size(2), hd = D / heads;
  auto q = qkv(x).view({B, N, 3, heads, hd}).permute({2, 0, 3, 1, 4});
  auto attn = (torch::matmul(q[0], q[1].transpose(-2, -1)) / std::sqrt(double(hd))).softmax(-1);
  return proj(torch::matmul(attn, q[2]).transpose(1, 2).reshape({B, N, D}));
}

namespace {

torch::nn::LayerNorm plain_norm(int64_t w) {
  return torch::nn::LayerNorm(torch::nn::LayerNormOptions({w}).elementwise_affine(false).eps(1e-6));
}

torch::Tensor modulate(const torch::Tensor& x, const torch::Tensor& shift, const torch::Tensor& scale) {
  return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1);
}

constexpr int64_t kFreqDim = 256;

}  // namespace

DiTBlockImpl::DiTBlockImpl(int64_t width, int64_t heads, double mlp_ratio) {
  const int64_t hidden = int64_t(std::lround(width * mlp_ratio));
  norm1 = register_module("norm1", plain_norm(width));
  attn = register_module("attn", SelfAttention(width, heads));
  norm2 = register_module("norm2", plain_norm(width));
  fc1 = register_module("fc1", torch::nn::Linear(width, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, width));
  modulation = register_module("modulation", torch::nn::Linear(width, 6 * width));
}

torch::Tensor DiTBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& c) {
  auto m = modulation(torch::silu(c)).chunk(6, 1);
  auto y = x + m[2].unsqueeze(1) * attn(modulate(norm1(x), m[0], m[1]));
  auto h = fc2(torch::gelu(fc1(modulate(norm2(y), m[3], m[4])), "tanh"));
  return y + m[5].unsqueeze(1) * h;
}

DiTImpl::DiTImpl(DiTConfig cfg_) : cfg(std::move(cfg_)) {
  cfg.validate();
  const int64_t W = cfg.width, p = cfg.patch;
  patch_embed = register_module("patch_embed", torch::nn::Linear(cfg.in_channels() * p * p, W));
  t_fc1 = register_module("t_fc1", torch::nn::Linear(kFreqDim, W));
  t_fc2 = register_module("t_fc2", torch::nn::Linear(W, W));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < cfg.depth; ++i) blocks->push_back(DiTBlock(W, cfg.heads, cfg.mlp_ratio));
  final_norm = register_module("final_norm", plain_norm(W));
  final_modulation = register_module("final_modulation", torch::nn::Linear(W, 2 * W));
  final_proj = register_module("final_proj", torch::nn::Linear(W, p * p * 2 * cfg.latent_channels));
  pos_embed = register_buffer("pos_embed", sincos_pos_embed_2d(W, cfg.latent_h / p, cfg.latent_w / p));

  init_transformer_weights(*this);
  torch::NoGradGuard guard;
  for (size_t i = 0; i < blocks->size(); ++i) {
    auto& b = blocks->at<DiTBlockImpl>(i);
    b.modulation->weight.zero_();
    b.modulation->bias.zero_();
  }
  final_modulation->weight.zero_();
  final_modulation->bias.zero_();
  final_proj->weight.zero_();
  final_proj->bias.zero_();
}

DenoiserOutput DiTImpl::forward(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t_index) {
  const int64_t B = x_t.size(0), C = cfg.latent_channels, h = cfg.latent_h, w = cfg.latent_w, p = cfg.patch;
  const int64_t Cc = cfg.in_channels() - C;
  if (x_t.dim() != 4 || x_t.size(1) != C || x_t.size(2) != h || x_t.size(3) != w) {
    throw ShapeError("denoiser x_t must be [B, " + std::to_string(C) + ", " + std::to_string(h) + ", " +
                     std::to_string(w) + "]");
  }
  if (cond.dim() != 4 || cond.size(0) != B || cond.size(1) != Cc || cond.size(2) != h || cond.size(3) != w) {
    throw ShapeError("denoiser conditioning must be [B, " + std::to_string(Cc) + ", " + std::to_string(h) + ", " +
                     std::to_string(w) + "]");
  }
  if (t_index.dim() != 1 || t_index.size(0) != B) throw ShapeError("denoiser needs one step index per batch row");
  const int64_t gh = h / p, gw = w / p, Cin = C + Cc;
  auto tokens = torch::cat({x_t, cond}, 1)
                    .view({B, Cin, gh, p, gw, p})
                    .permute({0, 2, 4, 1, 3, 5})
                    .reshape({B, gh * gw, Cin * p * p});
  auto x = patch_embed(tokens) + pos_embed.to(x_t.dtype()).unsqueeze(0);
  auto temb = timestep_embedding(t_index.to(torch::kDouble) - 1.0, kFreqDim).to(x_t.dtype());
  auto c = t_fc2(torch::silu(t_fc1(temb)));
  for (size_t i = 0; i < blocks->size(); ++i) {
    x = blocks->at<DiTBlockImpl>(i).forward(x, c);
    if (check_finite_values) check_finite(x, "dit.block" + std::to_string(i));
  }
  auto m = final_modulation(torch::silu(c)).chunk(2, 1);
  auto out = final_proj(modulate(final_norm(x), m[0], m[1]))
                 .view({B, gh, gw, 2 * C, p, p})
                 .permute({0, 3, 1, 4, 2, 5})
                 .reshape({B, 2 * C, h, w});
  return {out.narrow(1, 0, C), out.narrow(1, C, C)};
}

// ---------------------------------------------------------------------------
// Reverse process and loss

ReverseStep p_mean_variance(const NoiseSchedule& s, const torch::Tensor& x_t, const torch::Tensor& t,
                            const DenoiserOutput& out) {
  ReverseStep r;
  auto min_log = s.gather([&] {
    std::vector<double> v(s.T());
    for (int i = 1; i <= s.T(); ++i) v[i - 1] = s.posterior_log_variance_clipped(i);
    return v;
  }(), t, x_t);
  auto max_log = s.gather([&] {
    std::vector<double> v(s.T());
    for (int i = 1; i <= s.T(); ++i) v[i - 1] = std::log(s.beta(i));
    return v;
  }(), t, x_t);
  auto frac = (out.v + 1.0) / 2.0;
  r.log_variance = frac * max_log + (1.0 - frac) * min_log;
  auto ab = s.gather(s.alpha_bars(), t, x_t);
  r.x0 = (1.0 / ab).sqrt() * x_t - (1.0 / ab - 1.0).sqrt() * out.eps;
  std::vector<double> c0(s.T()), ct(s.T());
  for (int i = 1; i <= s.T(); ++i) {
    c0[i - 1] = s.posterior_coef_x0(i);
    ct[i - 1] = s.posterior_coef_xt(i);
  }
  r.mean = s.gather(c0, t, x_t) * r.x0 + s.gather(ct, t, x_t) * x_t;
  return r;
}

torch::Tensor normal_kl(const torch::Tensor& m1, const torch::Tensor& lv1, const torch::Tensor& m2,
                        const torch::Tensor& lv2) {
  auto kl = 0.5 * (-1.0 + lv2 - lv1 + torch::exp(lv1 - lv2) + (m1 - m2).pow(2) * torch::exp(-lv2));
  return kl.flatten(1).mean(1);
}

DiffusionLoss diffusion_loss(const NoiseSchedule& s, const torch::Tensor& x0, const torch::Tensor& x_t,
                             const torch::Tensor& t, const torch::Tensor& eps, const DenoiserOutput& out) {
  DiffusionLoss l;
  l.mse = (eps - out.eps).pow(2).flatten(1).mean(1);
  std::vector<double> c0(s.T()), ct(s.T()), lv(s.T());
  for (int i = 1; i <= s.T(); ++i) {
    c0[i - 1] = s.posterior_coef_x0(i);
    ct[i - 1] = s.posterior_coef_xt(i);
    lv[i - 1] = s.posterior_log_variance_clipped(i);
  }
  auto true_mean = s.gather(c0, t, x0) * x0 + s.gather(ct, t, x0) * x_t;
  auto true_lv = s.gather(lv, t, x0).expand_as(x0);
  auto p = p_mean_variance(s, x_t, t, DenoiserOutput{out.eps.detach(), out.v});
  const double ln2 = std::numbers::ln2;
  auto kl = normal_kl(true_mean, true_lv, p.mean, p.log_variance) / ln2;
  auto nll = (0.5 * (std::log(2.0 * std::numbers::pi) + p.log_variance +
                     (x0 - p.mean).pow(2) * torch::exp(-p.log_variance)))
                 .flatten(1)
                 .mean(1) /
             ln2;
  auto first = t.to(torch::kLong).eq(1).to(x0.device());
  l.vb = torch::where(first, nll, kl);
  l.mse = l.mse.mean();
  l.vb = l.vb.mean();
  l.total = l.mse + l.vb;
  return l;
}

torch::Tensor sample(DiT& model, const torch::Tensor& cond, const NoiseSchedule& schedule, int n_steps,
                     std::uint64_t seed) {
  auto rs = schedule.respaced(n_steps);
  const auto& cfg = model->cfg;
  auto dtype = model->patch_embed->weight.scalar_type();
  auto gen = make_generator(seed);
  torch::NoGradGuard guard;
  const int64_t B = cond.size(0);
  auto opts = torch::TensorOptions().dtype(dtype);
  auto x = torch::randn({B, cfg.latent_channels, cfg.latent_h, cfg.latent_w}, gen, opts);
  auto c = cond.to(dtype);
  for (int i = rs.T(); i >= 1; --i) {
    auto t = torch::full({B}, i, torch::kLong);
    auto t_orig = torch::full({B}, rs.original_step(i), torch::kLong);
    auto out = model->forward(x, c, t_orig);
    auto r = p_mean_variance(rs, x, t, out);
    if (i > 1) {
      x = r.mean + torch::exp(0.5 * r.log_variance) * torch::randn(x.sizes(), gen, opts);
    } else {
      x = r.mean;
    }
  }
  return x;
}

torch::Tensor enmax(const std::vector<torch::Tensor>& members) {
  if (members.empty()) throw InvalidArgument("enmax needs at least one member");
  auto out = members.front();
  for (size_t i = 1; i < members.size(); ++i) {
    if (members[i].sizes() != out.sizes()) throw ShapeError("enmax members differ in shape");
    out = torch::maximum(out, members[i]);
  }
  return out;
}

std::uint64_t member_seed(std::uint64_t seed, int member) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * std::uint64_t(member + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Training and persistence

DiffusionTrainer::DiffusionTrainer(DiT model, NoiseSchedule schedule, DiffusionTrainOptions opt)
    : model_(std::move(model)), schedule_(std::move(schedule)), opt_(opt) {
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(), torch::optim::AdamWOptions(opt_.lr).weight_decay(opt_.weight_decay));
}

DiffusionLoss DiffusionTrainer::train_step(const torch::Tensor& cond, const torch::Tensor& z0) {
  model_->train();
  const int64_t B = z0.size(0);
  auto gen = make_generator(step_seed(opt_.seed, step_));
  auto t = torch::randint(1, schedule_.T() + 1, {B}, gen, torch::TensorOptions().dtype(torch::kLong));
  auto eps = torch::randn(z0.sizes(), gen, z0.options());
  auto x_t = schedule_.q_sample(z0, t, eps);
  auto out = model_->forward(x_t, cond, t);
  auto loss = diffusion_loss(schedule_, z0, x_t, t, eps, out);
  const double v = loss.total.item<double>();
  if (!std::isfinite(v)) throw NumericalError("diffusion loss is not finite at step " + std::to_string(step_));
  optimizer_->zero_grad();
  loss.total.backward();
  optimizer_->step();
  ++step_;
  return loss;
}

void DiffusionTrainer::save(const std::filesystem::path& path, const LatentScales& scales) const {
  save_dit(path, model_, scales, schedule_.T(), step_, opt_.seed, optimizer_.get());
}

DiffusionTrainer::Resumed DiffusionTrainer::resume(const std::filesystem::path& path, DiffusionTrainOptions opt) {
  auto info = read_checkpoint_info(path, kDiTCheckpointKind);
  auto cfg = info.config.get<DiTConfig>();
  DiT model(cfg);
  DiffusionTrainer t(model, NoiseSchedule::linear(info.extra.at("T").get<int>()), opt);
  info = load_checkpoint(path, kDiTCheckpointKind, *model, cfg.fingerprint(), t.optimizer_.get());
  t.step_ = info.step;
  const auto& s = info.extra.at("scales");
  return {std::move(t), {s.at("state").get<double>(), s.at("precip").get<double>(), s.at("hires").get<double>()}};
}

void save_dit(const std::filesystem::path& path, const DiT& model, const LatentScales& scales, int T,
              std::int64_t step, std::uint64_t seed, const torch::optim::Optimizer* optimizer) {
  CheckpointInfo info;
  info.fingerprint = model->cfg.fingerprint();
  info.config = model->cfg;
  info.step = step;
  info.seed = seed;
  info.extra = {{"T", T}, {"scales", {{"state", scales.state}, {"precip", scales.precip}, {"hires", scales.hires}}}};
  save_checkpoint(path, kDiTCheckpointKind, *model, info, optimizer);
}

LoadedDiT load_dit(const std::filesystem::path& path) {
  auto info = read_checkpoint_info(path, kDiTCheckpointKind);
  LoadedDiT out;
  auto cfg = info.config.get<DiTConfig>();
  out.model = DiT(cfg);
  load_checkpoint(path, kDiTCheckpointKind, *out.model, cfg.fingerprint());
  out.model->eval();
  out.T = info.extra.at("T").get<int>();
  const auto& s = info.extra.at("scales");
  out.scales = {s.at("state").get<double>(), s.at("precip").get<double>(), s.at("hires").get<double>()};
  return out;
}

// ---------------------------------------------------------------------------
// Diagnosis

void Diagnoser::validate() const {
  if (!state_codec || !precip_codec || !hires_codec || !dit) throw InvalidArgument("diagnoser is incomplete");
  if (state_codec->spec.id != CodecId::kState || precip_codec->spec.id != CodecId::kPrecip ||
      hires_codec->spec.id != CodecId::kHiresPrecip) {
    throw InvalidArgument("diagnoser codecs are not (state, precip, hires_precip)");
  }
  const auto& c = dit->cfg;
  for (const auto* codec : {&state_codec, &precip_codec, &hires_codec}) {
    const auto& l = (*codec)->spec.latent;
    if (l[1] != c.latent_h || l[2] != c.latent_w) {
      throw ShapeError("codec " + to_string((*codec)->spec.id) + " latent grid does not match the denoiser");
    }
  }
  if (c.cond_channels != std::vector<int>{state_codec->spec.latent[0], precip_codec->spec.latent[0],
                                          hires_codec->spec.latent[0]} ||
      c.latent_channels != hires_codec->spec.latent[0]) {
    throw ShapeError("denoiser channels do not match the codec latents");
  }
  if (state_stats.size() != state_codec->spec.input[0]) {
    throw ShapeError("state statistics do not match the state codec channels");
  }
}

torch::Tensor Diagnoser::condition(const torch::Tensor& state, const torch::Tensor& precip,
                                   const torch::Tensor& hires_prev, std::optional<torch::Generator> generator) const {
  torch::NoGradGuard guard;
  auto xs = normalize_channels(state.to(torch::kFloat32), state_stats, 1);
  auto p = ((precip_to_dbz(precip.to(torch::kFloat32)) - tp_dbz_mean) / tp_dbz_std).unsqueeze(1);
  auto hp = ((precip_to_dbz(hires_prev.to(torch::kFloat32)) - hires_dbz_mean) / hires_dbz_std).unsqueeze(1);
  // Holders are shared handles; copies give non-const access to the same modules.
  Codec sc = state_codec, pc = precip_codec, hc = hires_codec;
  auto lx = sc->encode(xs, generator);
  auto lp = pc->encode(p, generator);
  auto lh = hc->encode(hp, generator);
  return torch::cat({lx.z * scales.state, lp.z * scales.precip, lh.z * scales.hires}, 1);
}

torch::Tensor Diagnoser::target(const torch::Tensor& hires, std::optional<torch::Generator> generator) const {
  torch::NoGradGuard guard;
  auto h = ((precip_to_dbz(hires.to(torch::kFloat32)) - hires_dbz_mean) / hires_dbz_std).unsqueeze(1);
  Codec hc = hires_codec;
  return hc->encode(h, generator).z * scales.hires;
}

torch::Tensor Diagnoser::decode_precip(const torch::Tensor& z) const {
  torch::NoGradGuard guard;
  Codec hc = hires_codec;
  auto dbz = hc->decode_z(z / scales.hires).squeeze(1) * hires_dbz_std + hires_dbz_mean;
  return dbz_to_precip(dbz);
}

torch::Tensor Diagnoser::diagnose(const torch::Tensor& state, const torch::Tensor& precip,
                                  const torch::Tensor& hires_prev, int n_members, std::uint64_t seed, int n_steps,
                                  std::vector<torch::Tensor>* members_out) const {
  validate();
  if (n_members < 1) throw InvalidArgument("n_members must be >= 1");
  auto cond = with_stage("encode", [&] { return condition(state, precip, hires_prev); });
  auto schedule = NoiseSchedule::linear(T);
  std::vector<torch::Tensor> members;
  for (int m = 0; m < n_members; ++m) {
    auto dit_copy = dit;
    auto z = with_stage("sample", [&] { return sample(dit_copy, cond, schedule, n_steps, member_seed(seed, m)); });
    members.push_back(with_stage("decode", [&] { return decode_precip(z); }));
  }
  if (members_out) *members_out = members;
  return enmax(members);
}

}  // namespace regcast
