#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regcast/archive.hpp"
#include "regcast/checkpoint.hpp"

namespace regcast {

enum class CodecId { kState, kPrecip, kHiresPrecip };
std::string to_string(CodecId id);
CodecId codec_id_from_string(const std::string& s);

/// Shapes and widths of one VAE. Inputs and reconstructions are [C, H, W];
/// latents [latent_channels, latent_h, latent_w].
struct CodecSpec {
  CodecId id = CodecId::kState;
  std::array<int, 3> input{69, 181, 281};
  std::array<int, 3> latent{256, 32, 32};
  std::vector<int> widths{32, 64, 128, 256};

  /// Full-scale shapes: state 69x181x281 -> 256x32x32, coarse precipitation
  /// 1x181x281 -> 16x32x32, high-resolution precipitation 1x900x1400 -> 16x32x32.
  static CodecSpec full_scale(CodecId id);

  /// Number of stride-2 stages: the largest k with ceil(H / 2^k) >= latent_h
  /// and ceil(W / 2^k) >= latent_w. The encoder then area-pools to the latent grid.
  int n_down() const;
  int width(int level) const { return widths[std::min<std::size_t>(level, widths.size() - 1)]; }
  void validate() const;
  std::string fingerprint() const;
};

void to_json(json& j, const CodecSpec& s);
void from_json(const json& j, CodecSpec& s);

/// Diagonal Gaussian posterior plus the draw taken from it.
struct LatentBlock {
  CodecId id = CodecId::kState;
  torch::Tensor mean;    // [B, Cz, h, w]
  torch::Tensor logvar;  // [B, Cz, h, w]
  torch::Tensor eps;     // recorded noise; undefined for mean-only encodes
  torch::Tensor z;       // mean + exp(logvar / 2) * eps, or mean

  /// Recomputes z from (mean, logvar, eps).
  torch::Tensor resample() const;
};

struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResBlock);

/// Convolutional VAE for one codec spec.
struct CodecImpl : torch::nn::Module {
  explicit CodecImpl(CodecSpec spec);

  /// x: [B, C, H, W] normalized. With `generator` the posterior is sampled and
  /// the noise recorded; without it z is the mean.
  LatentBlock encode(const torch::Tensor& x, std::optional<torch::Generator> generator = std::nullopt);
  /// Refuses latents tagged with another codec id.
  torch::Tensor decode(const LatentBlock& latent);
  torch::Tensor decode_z(const torch::Tensor& z);

  /// Weight of the last decoder layer (used for the adaptive adversarial weight).
  torch::Tensor last_layer_weight() { return dec_out->weight; }

  CodecSpec spec;
  torch::nn::Conv2d enc_in{nullptr}, enc_out{nullptr}, dec_in{nullptr}, dec_out{nullptr};
  torch::nn::ModuleList enc_blocks{nullptr}, enc_down{nullptr}, dec_blocks{nullptr}, dec_up{nullptr};
  ResBlock enc_mid{nullptr}, dec_mid{nullptr};
  torch::nn::GroupNorm enc_norm{nullptr}, dec_norm{nullptr};
};
TORCH_MODULE(Codec);

/// Fixed multi-layer feature distance standing in for a pretrained perceptual
/// network: a frozen, seeded three-stage conv pyramid; features are unit
/// normalized over channels and the squared differences averaged over space,
/// summed over stages and averaged over the batch.
struct PerceptualDistanceImpl : torch::nn::Module {
  PerceptualDistanceImpl(int64_t in_channels, std::uint64_t seed = 0x5eed);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& y);

  torch::nn::ModuleList stages{nullptr};
};
TORCH_MODULE(PerceptualDistance);

/// PatchGAN-style discriminator emitting a score map.
struct DiscriminatorImpl : torch::nn::Module {
  DiscriminatorImpl(int64_t in_channels, int64_t width = 32);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(Discriminator);

struct GenLossWeights {
  double lambda = 0.1;  // perceptual
  double gamma = 1e-6;  // KL
  std::int64_t disc_start = 0;  // adversarial term and discriminator updates begin here
  void validate() const;
};

/// Weighted terms of the generator objective; total == mae + lpips + kl + adv.
struct GenLossTerms {
  torch::Tensor total, mae, lpips, kl, adv;
  double psi = 0.0;
  double raw_kl = 0.0;
  double raw_lpips = 0.0;
  double disc = 0.0;  // discriminator loss of the same step, when it ran
};

/// Closed-form KL(N(mean, exp(logvar)) || N(0, I)), summed per sample and
/// averaged over the batch.
torch::Tensor kl_standard_normal(const torch::Tensor& mean, const torch::Tensor& logvar);

/// MAE + lambda * LPIPS + gamma * KL + psi * (-mean(fake_score)).
/// `fake_score` may be undefined (adversarial term 0). Throws NumericalError
/// naming the first non-finite component.
GenLossTerms generator_loss(const torch::Tensor& x, const torch::Tensor& recon, const LatentBlock& latent,
                            const torch::Tensor& fake_score, const torch::Tensor& lpips_value,
                            const GenLossWeights& w, double psi);

/// mean(relu(1 - real)) + mean(relu(1 + fake)).
torch::Tensor discriminator_loss(const torch::Tensor& real_score, const torch::Tensor& fake_score);

/// grad_norm_rec / (grad_norm_adv + 1e-6) clamped to [0, 1e4]; 0 in warm-up.
double adaptive_psi(double grad_norm_rec, double grad_norm_adv, bool warmup);

struct VaeTrainOptions {
  double lr = 3e-4;
  double disc_lr = 3e-4;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int disc_width = 32;
  GenLossWeights weights;
};

/// Alternating generator/discriminator training of one codec.
class VaeTrainer {
 public:
  VaeTrainer(Codec codec, VaeTrainOptions opt = {});

  /// One generator step and (after warm-up) one discriminator step on x. The
  /// posterior draw uses a generator seeded by (seed, step).
  GenLossTerms train_step(const torch::Tensor& x);
  std::int64_t step() const { return step_; }
  Codec& codec() { return codec_; }
  Discriminator& discriminator() { return disc_; }

  /// Writes a codec checkpoint (readable by load_codec) that also carries the
  /// discriminator and both optimizer states.
  void save(const std::filesystem::path& path) const;
  /// Restores a trainer saved by save(); the codec spec comes from the file.
  static VaeTrainer resume(const std::filesystem::path& path, VaeTrainOptions opt = {});

 private:
  Codec codec_;
  Discriminator disc_;
  PerceptualDistance lpips_;
  VaeTrainOptions opt_;
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  std::int64_t step_ = 0;
};

inline constexpr const char* kCodecCheckpointKind = "codec-checkpoint";
/// Loads a codec; when `expected` is given the stored spec must match it.
Codec load_codec(const std::filesystem::path& path, const CodecSpec* expected = nullptr);
void save_codec(const std::filesystem::path& path, const Codec& codec, std::int64_t step = 0,
                std::uint64_t seed = 0);

}  // namespace regcast
