#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "regcast/codec.hpp"
#include "regcast/grid.hpp"

namespace regcast {

/// Discrete DDPM noise schedule. Steps are 1-based: t = 1..T, with
/// alpha_bar(0) == 1. A respaced schedule keeps, for each of its steps, the
/// original step it stands for (`original_step`), which is what the denoiser
/// is conditioned on.
class NoiseSchedule {
 public:
  /// Betas linear from beta_1 to beta_T.
  static NoiseSchedule linear(int T = 1000, double beta_1 = 1e-4, double beta_T = 0.02);
  /// Schedule over `n_steps` evenly spaced original steps (always including the
  /// first and last), with betas recomputed so the kept alpha_bar values are
  /// unchanged. Where consecutive kept steps are adjacent the original beta is
  /// reused verbatim, so respaced(T) is bit-identical to the original.
  NoiseSchedule respaced(int n_steps) const;

  int T() const { return int(betas_.size()); }
  double beta(int t) const;
  double alpha_bar(int t) const;
  int original_step(int t) const;
  /// beta~_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
  double posterior_variance(int t) const;
  /// log beta~_t, with the t = 1 value (0) replaced by log beta~_2.
  double posterior_log_variance_clipped(int t) const;
  /// Posterior mean = coef_x0 * x0 + coef_xt * x_t.
  double posterior_coef_x0(int t) const;
  double posterior_coef_xt(int t) const;

  /// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, for one t per batch row.
  torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps) const;
  torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps) const;

  /// Per-row coefficient gather: values[t - 1] broadcast to x's rank.
  torch::Tensor gather(const std::vector<double>& values, const torch::Tensor& t, const torch::Tensor& like) const;

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  void check(int t) const;
  void finalize();

  std::vector<double> betas_, alpha_bars_;
  std::vector<int> original_;
  std::vector<double> post_var_, post_logvar_clipped_, coef_x0_, coef_xt_, log_betas_;
};

/// Output of the denoiser: predicted noise and the variance interpolation
/// value v in [-1, 1] (log variance = frac * log beta_t + (1 - frac) *
/// log beta~_t with frac = (v + 1) / 2).
struct DenoiserOutput {
  torch::Tensor eps;
  torch::Tensor v;
};

struct DiTConfig {
  int latent_channels = 16;                // target latent (high-resolution precipitation)
  std::vector<int> cond_channels{256, 16, 16};  // state, coarse precip, previous high-res precip
  int latent_h = 32;
  int latent_w = 32;
  int patch = 2;
  int width = 192;
  int depth = 12;
  int heads = 6;
  double mlp_ratio = 4.0;

  int in_channels() const;
  int tokens() const { return (latent_h / patch) * (latent_w / patch); }
  void validate() const;
  std::string fingerprint() const;
};

void to_json(json& j, const DiTConfig& c);
void from_json(const json& j, DiTConfig& c);

/// Self-attention over a token sequence [B, N, D].
struct SelfAttentionImpl : torch::nn::Module {
  SelfAttentionImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t heads;
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(SelfAttention);

/// Transformer block with adaptive layer-norm modulation (shift, scale, gate)
/// from the conditioning vector; the modulation layer starts at zero so each
/// block starts as the identity.
struct DiTBlockImpl : torch::nn::Module {
  DiTBlockImpl(int64_t width, int64_t heads, double mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& c);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  SelfAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, modulation{nullptr};
};
TORCH_MODULE(DiTBlock);

/// Transformer denoiser over [2, 2] latent patches. Input is x_t concatenated
/// channelwise with the conditioning latents.
struct DiTImpl : torch::nn::Module {
  explicit DiTImpl(DiTConfig cfg);

  /// x_t: [B, latent_channels, h, w]; cond: [B, sum(cond_channels), h, w];
  /// t_index: [B] original 1-based steps.
  DenoiserOutput forward(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t_index);

  DiTConfig cfg;
  bool check_finite_values = true;
  torch::nn::Linear patch_embed{nullptr}, t_fc1{nullptr}, t_fc2{nullptr};
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear final_modulation{nullptr}, final_proj{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::Tensor pos_embed;  // buffer [tokens, width]
};
TORCH_MODULE(DiT);

/// Sinusoidal embedding of (possibly fractional) step indices, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, double max_period = 10000.0);
/// Fixed 2D sine-cosine position table, [h * w, dim].
torch::Tensor sincos_pos_embed_2d(int64_t dim, int64_t h, int64_t w);

/// Reverse-process quantities for one denoiser output on schedule `s`.
struct ReverseStep {
  torch::Tensor mean;
  torch::Tensor log_variance;
  torch::Tensor x0;
};
ReverseStep p_mean_variance(const NoiseSchedule& s, const torch::Tensor& x_t, const torch::Tensor& t,
                            const DenoiserOutput& out);

/// Per-row KL(N(m1, exp(lv1)) || N(m2, exp(lv2))) averaged over non-batch dims.
torch::Tensor normal_kl(const torch::Tensor& m1, const torch::Tensor& lv1, const torch::Tensor& m2,
                        const torch::Tensor& lv2);

struct DiffusionLoss {
  torch::Tensor total, mse, vb;
};

/// MSE(eps, eps_hat) + vb, where vb is the KL between the true posterior and
/// the model's reverse step (or the Gaussian NLL of x0 at t = 1), in bits per
/// dimension, computed with the predicted mean detached so it trains only
/// the variance.
DiffusionLoss diffusion_loss(const NoiseSchedule& s, const torch::Tensor& x0, const torch::Tensor& x_t,
                             const torch::Tensor& t, const torch::Tensor& eps, const DenoiserOutput& out);

/// Ancestral sampling over schedule.respaced(n_steps): x_T ~ N(0, I), then one
/// reverse step per kept step, drawing fresh noise for every step but the last
/// (which returns the mean). Deterministic for a given seed.
torch::Tensor sample(DiT& model, const torch::Tensor& cond, const NoiseSchedule& schedule, int n_steps,
                     std::uint64_t seed);

/// Pixelwise maximum across members; throws for an empty list or mismatched shapes.
torch::Tensor enmax(const std::vector<torch::Tensor>& members);

/// Seed for ensemble member `member` derived from the run seed.
std::uint64_t member_seed(std::uint64_t seed, int member);

/// Multipliers applied to codec latents before diffusion (1 / latent std).
struct LatentScales {
  double state = 1.0, precip = 1.0, hires = 1.0;
};

struct DiffusionTrainOptions {
  double lr = 3e-4;
  double weight_decay = 0.0;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

/// Trains the denoiser on (conditioning, target latent) pairs that are
/// already encoded and scaled; codecs never enter the graph.
class DiffusionTrainer {
 public:
  DiffusionTrainer(DiT model, NoiseSchedule schedule, DiffusionTrainOptions opt = {});
  /// One AdamW step with t and noise drawn from a generator seeded by
  /// (seed, step); returns the loss terms.
  DiffusionLoss train_step(const torch::Tensor& cond, const torch::Tensor& z0);
  std::int64_t step() const { return step_; }
  DiT& model() { return model_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// A DiT checkpoint (readable by load_dit) that also carries the optimizer.
  void save(const std::filesystem::path& path, const LatentScales& scales) const;
  struct Resumed;
  /// Restores the trainer on a linear schedule of the stored length.
  static Resumed resume(const std::filesystem::path& path, DiffusionTrainOptions opt = {});

 private:
  DiT model_;
  NoiseSchedule schedule_;
  DiffusionTrainOptions opt_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::int64_t step_ = 0;
};

struct DiffusionTrainer::Resumed {
  DiffusionTrainer trainer;
  LatentScales scales;
};

inline constexpr const char* kDiTCheckpointKind = "dit-checkpoint";
void save_dit(const std::filesystem::path& path, const DiT& model, const LatentScales& scales, int T,
              std::int64_t step = 0, std::uint64_t seed = 0, const torch::optim::Optimizer* optimizer = nullptr);
struct LoadedDiT {
  DiT model{nullptr};
  LatentScales scales;
  int T = 1000;
};
LoadedDiT load_dit(const std::filesystem::path& path);

/// Codecs, statistics and denoiser needed to diagnose high-resolution
/// precipitation from physical-unit inputs.
struct Diagnoser {
  Codec state_codec{nullptr}, precip_codec{nullptr}, hires_codec{nullptr};
  DiT dit{nullptr};
  LatentScales scales;
  NormStats state_stats;  // channels of the state codec input, in order
  double tp_dbz_mean = 0.0, tp_dbz_std = 1.0;
  double hires_dbz_mean = 0.0, hires_dbz_std = 1.0;
  int T = 1000;

  /// Checks codec ids and the latent grid against the denoiser config.
  void validate() const;

  /// Scaled conditioning [B, sum(cond_channels), h, w]. state: [B, C, H, W]
  /// (cropped to the state codec grid), precip: [B, H, W] and hires_prev:
  /// [B, Hh, Wh] in mm/h. With a generator the posteriors are sampled.
  torch::Tensor condition(const torch::Tensor& state, const torch::Tensor& precip, const torch::Tensor& hires_prev,
                          std::optional<torch::Generator> generator = std::nullopt) const;
  /// Scaled target latent of a high-resolution precipitation field [B, Hh, Wh] mm/h.
  torch::Tensor target(const torch::Tensor& hires, std::optional<torch::Generator> generator = std::nullopt) const;
  /// Decodes a scaled target latent to mm/h, [B, Hh, Wh].
  torch::Tensor decode_precip(const torch::Tensor& z) const;

  /// EnMax over `n_members` samples, mm/h [B, Hh, Wh]; members are drawn with
  /// member_seed(seed, m). The conditioning uses posterior means, as in training.
  torch::Tensor diagnose(const torch::Tensor& state, const torch::Tensor& precip, const torch::Tensor& hires_prev,
                         int n_members, std::uint64_t seed, int n_steps = 250,
                         std::vector<torch::Tensor>* members_out = nullptr) const;
};

}  // namespace regcast
