#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string>

#include "regcast/archive.hpp"
#include "regcast/grid.hpp"
#include "regcast/nn_common.hpp"

namespace regcast {

/// Patch embedding geometry. With `sliding` on, each kernel is larger than
/// its stride so neighbouring patches overlap; with it off, kernels collapse to
/// the strides (classical non-overlapping patches).
struct EmbedConfig {
  std::array<int, 2> surface_stride{4, 4};
  std::array<int, 2> surface_kernel{7, 7};
  std::array<int, 3> pressure_stride{2, 4, 4};
  std::array<int, 3> pressure_kernel{5, 7, 7};
  /// Boundary kernel along (width, perimeter); the perimeter stride is the
  /// surface stride, and the width axis is always collapsed to one token.
  std::array<int, 2> boundary_kernel{7, 7};
  int dim = 48;
  bool sliding = true;

  /// Kernels actually used (equal to strides when sliding is off).
  std::array<int, 2> surface_kernel_eff() const;
  std::array<int, 3> pressure_kernel_eff() const;
  /// Width-axis stride is the strip width, so the width collapses to one token.
  std::array<int, 2> boundary_kernel_eff(int width) const;
  void validate() const;
};

/// How window padding is filled before attention. Padded keys are always
/// masked; the fill only exists so tests can prove it never leaks.
enum class PadFill { kReplicate, kZeros, kConstant };

struct ForecasterConfig {
  GridSpec grid = GridSpec::full_scale();
  VariableInventory inventory = VariableInventory::full_scale();
  EmbedConfig embed;
  std::array<int, 3> depths{2, 2, 2};
  std::array<int, 3> heads{3, 6, 6};
  std::array<int, 3> window{2, 6, 6};  // depth, lat, lon
  double mlp_ratio = 4.0;
  bool skip = true;
  int boundary_width = 4;
  int lead_hours = 1;

  static ForecasterConfig full_scale();
  /// Small default for desk runs on `grid`/`inv`.
  static ForecasterConfig toy(const GridSpec& grid, const VariableInventory& inv);

  /// Token grid (depth, lat, lon) before the boundary ring is attached.
  std::array<int64_t, 3> token_grid() const;
  int layer_dim(int layer) const;
  void validate() const;

  /// Architecture-only description (lead time excluded) and its hash.
  json architecture_json() const;
  std::string fingerprint() const;
};

void to_json(json& j, const ForecasterConfig& c);
void from_json(const json& j, ForecasterConfig& c);

/// Sliding patch embedding of a [B, C, H, W] field to [B, D, ceil(H/s), ceil(W/s)].
struct PatchEmbed2dImpl : torch::nn::Module {
  PatchEmbed2dImpl(int64_t in, int64_t dim, std::array<int, 2> kernel, std::array<int, 2> stride);
  torch::Tensor forward(const torch::Tensor& x);

  std::array<int, 2> kernel, stride;
  torch::nn::Conv2d proj{nullptr};
};
TORCH_MODULE(PatchEmbed2d);

/// Sliding patch embedding of a [B, C, L, H, W] field.
struct PatchEmbed3dImpl : torch::nn::Module {
  PatchEmbed3dImpl(int64_t in, int64_t dim, std::array<int, 3> kernel, std::array<int, 3> stride);
  torch::Tensor forward(const torch::Tensor& x);

  std::array<int, 3> kernel, stride;
  torch::nn::Conv3d proj{nullptr};
};
TORCH_MODULE(PatchEmbed3d);

/// Windowed multi-head self-attention over a 3D token grid with relative
/// position bias, optional cyclic shift, and masking of padded and wrapped
/// positions.
struct WindowAttentionImpl : torch::nn::Module {
  WindowAttentionImpl(int64_t dim, int64_t heads, std::array<int, 3> window);
  /// x: [B, Z, H, W, D] (any size; padded internally). Along an axis no longer
  /// than the window, the window shrinks to the axis and is never shifted.
  torch::Tensor forward(const torch::Tensor& x, bool shifted);

  int64_t dim, heads;
  std::array<int, 3> window;
  PadFill pad_fill = PadFill::kReplicate;
  double pad_constant = 0.0;
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  torch::Tensor bias_table;  // [(2wz-1)(2wh-1)(2ww-1), heads]
};
TORCH_MODULE(WindowAttention);

struct SwinBlockImpl : torch::nn::Module {
  SwinBlockImpl(int64_t dim, int64_t heads, std::array<int, 3> window, bool shifted, double mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x);

  bool shifted;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  WindowAttention attn{nullptr};
  Mlp mlp{nullptr};
};
TORCH_MODULE(SwinBlock);

/// 2x2 horizontal patch merging, D -> 2D.
struct PatchMergeImpl : torch::nn::Module {
  explicit PatchMergeImpl(int64_t dim);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear reduce{nullptr};
};
TORCH_MODULE(PatchMerge);

/// Transpose of PatchMerge: 2D -> D on a 2x finer grid cropped to (h, w).
struct PatchExpandImpl : torch::nn::Module {
  explicit PatchExpandImpl(int64_t dim);
  torch::Tensor forward(const torch::Tensor& x, int64_t h, int64_t w);

  int64_t dim;
  torch::nn::Linear expand{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(PatchExpand);

/// The forecast operator: X_{t+s} = F(X_t, B_{t+s}, d).
///
/// Token layout: surface (+ topography) patches form depth slice 0 and the
/// pressure patches the following slices. The boundary is embedded separately
/// into one token per (depth, perimeter patch), split into its four edge
/// groups and placed as a one-token ring around the token grid:
///   ring row 0        <- first-row strip (Wl + 2 tokens, corners included)
///   ring row Hl + 1   <- last-row strip  (Wl + 2 tokens)
///   ring col 0        <- first-column strip (Hl tokens)
///   ring col Wl + 1   <- last-column strip  (Hl tokens)
/// so no input token is overwritten. Without a boundary, a learned null token
/// fills the ring.
struct ForecasterImpl : torch::nn::Module {
  explicit ForecasterImpl(ForecasterConfig cfg);

  /// x: [B, C, H, W] normalized, topography: [H, W] normalized.
  /// Returns tokens [B, Z, Hl, Wl, D].
  torch::Tensor embed_inputs(const torch::Tensor& x, const torch::Tensor& topography);
  /// strip: [B, C, width, perimeter] normalized -> [B, Z, n_boundary_tokens / Z, D].
  torch::Tensor embed_boundary(const torch::Tensor& strip);
  /// Returns [B, Z, Hl + 2, Wl + 2, D]; `boundary_tokens` undefined -> null ring.
  torch::Tensor attach_boundary(const torch::Tensor& tokens, const torch::Tensor& boundary_tokens);
  /// Tokens added by the boundary ring (all depth slices).
  int64_t boundary_token_count() const;

  /// Full network; `strip` may be undefined (null-boundary mode).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& strip,
                        const torch::Tensor& topography);

  void set_pad_fill(PadFill fill, double constant = 0.0);

  ForecasterConfig cfg;
  bool check_finite_values = true;
  PatchEmbed2d surface_embed{nullptr};
  PatchEmbed3d pressure_embed{nullptr};
  torch::nn::Conv2d boundary_proj{nullptr};
  torch::Tensor null_token;
  torch::nn::ModuleList layer1{nullptr}, layer2{nullptr}, layer3{nullptr};
  PatchMerge down{nullptr};
  PatchExpand up{nullptr};
  torch::nn::LayerNorm out_norm{nullptr};
  torch::nn::Linear surface_head{nullptr}, pressure_head{nullptr};

 private:
  torch::Tensor run_layer(torch::nn::ModuleList& layer, torch::Tensor x, const std::string& name);
  torch::Tensor recover(const torch::Tensor& tokens);
};
TORCH_MODULE(Forecaster);

/// State-level wrapper: checks that the boundary is valid at the target time
/// (input time + lead) and returns the normalized prediction at that time.
WeatherState predict(Forecaster& model, const WeatherState& input,
                     const std::optional<BoundaryStrip>& boundary, const torch::Tensor& topography);

}  // namespace regcast
