#include "regcast/forecaster.hpp"

#include <cmath>
#include <cstdio>

#include "regcast/error.hpp"
#include "regcast/serialization.hpp"

namespace regcast {

namespace {

using torch::indexing::Slice;

/// Appends `n` slices along `dim`, filled per `fill`.
torch::Tensor pad_tail(const torch::Tensor& x, int64_t dim, int64_t n, PadFill fill, double c = 0.0) {
  if (n == 0) return x;
  auto shape = x.sizes().vec();
  shape[dim] = n;
  torch::Tensor tail;
  switch (fill) {
    case PadFill::kReplicate: tail = x.narrow(dim, x.size(dim) - 1, 1).expand(shape); break;
    case PadFill::kZeros: tail = torch::zeros(shape, x.options()); break;
    case PadFill::kConstant: tail = torch::full(shape, c, x.options()); break;
  }
  return torch::cat({x, tail}, dim);
}

void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::string shape_str(const torch::Tensor& t) {
  std::string s = "[";
  for (int64_t i = 0; i < t.dim(); ++i) s += (i ? ", " : "") + std::to_string(t.size(i));
  return s + "]";
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::array<int, 2> EmbedConfig::surface_kernel_eff() const {
  return sliding ? surface_kernel : surface_stride;
}

std::array<int, 3> EmbedConfig::pressure_kernel_eff() const {
  return sliding ? pressure_kernel : pressure_stride;
}

std::array<int, 2> EmbedConfig::boundary_kernel_eff(int width) const {
  return sliding ? boundary_kernel : std::array<int, 2>{width, surface_stride[0]};
}

void EmbedConfig::validate() const {
  if (dim < 1) throw InvalidArgument("embed.dim must be positive");
  for (int i = 0; i < 2; ++i) {
    if (surface_stride[i] < 1 || surface_kernel[i] < surface_stride[i]) {
      throw InvalidArgument("embed: surface kernel must be >= stride >= 1");
    }
  }
  for (int i = 0; i < 3; ++i) {
    if (pressure_stride[i] < 1 || pressure_kernel[i] < pressure_stride[i]) {
      throw InvalidArgument("embed: pressure kernel must be >= stride >= 1");
    }
  }
  if (surface_stride[0] != pressure_stride[1] || surface_stride[1] != pressure_stride[2]) {
    throw InvalidArgument("embed: surface and pressure horizontal strides must agree");
  }
  if (surface_stride[0] != surface_stride[1]) {
    throw InvalidArgument("embed: boundary embedding needs equal lat/lon strides");
  }
  if (boundary_kernel[1] < surface_stride[0]) {
    throw InvalidArgument("embed: boundary kernel must be >= stride along the perimeter");
  }
}

ForecasterConfig ForecasterConfig::full_scale() {
  ForecasterConfig c;
  c.embed.dim = 96;
  c.depths = {2, 6, 2};
  c.heads = {6, 12, 12};
  return c;
}

ForecasterConfig ForecasterConfig::toy(const GridSpec& grid, const VariableInventory& inv) {
  ForecasterConfig c;
  c.grid = grid;
  c.inventory = inv;
  c.embed.dim = 24;
  c.depths = {2, 2, 2};
  c.heads = {2, 4, 4};
  return c;
}

std::array<int64_t, 3> ForecasterConfig::token_grid() const {
  return {1 + ceil_div(inventory.n_levels(), embed.pressure_stride[0]),
          ceil_div(grid.n_lat, embed.surface_stride[0]), ceil_div(grid.n_lon, embed.surface_stride[1])};
}

int ForecasterConfig::layer_dim(int layer) const {
  switch (layer) {
    case 1: return embed.dim;
    case 2: return 2 * embed.dim;
    case 3: return skip ? 2 * embed.dim : embed.dim;
    default: throw InvalidArgument("layer index must be 1..3");
  }
}

void ForecasterConfig::validate() const {
  grid.validate();
  inventory.validate();
  embed.validate();
  if (inventory.n_levels() < 1) throw InvalidArgument("forecaster needs at least one pressure level");
  for (int i = 0; i < 3; ++i) {
    if (depths[i] < 1 || heads[i] < 1) throw InvalidArgument("depths and heads must be positive");
    if (layer_dim(i + 1) % heads[i] != 0) {
      throw InvalidArgument("layer " + std::to_string(i + 1) + " width " +
                            std::to_string(layer_dim(i + 1)) + " not divisible by " +
                            std::to_string(heads[i]) + " heads");
    }
    if (window[i] < 1) throw InvalidArgument("window sizes must be positive");
  }
  if (mlp_ratio <= 0.0) throw InvalidArgument("mlp_ratio must be positive");
  if (boundary_width < 1 || boundary_width > std::min(grid.n_lat, grid.n_lon) / 2) {
    throw InvalidArgument("boundary_width out of range");
  }
  if (embed.sliding && embed.boundary_kernel[0] < boundary_width) {
    throw InvalidArgument("embed: boundary kernel must cover the strip width");
  }
  if (lead_hours != 1 && lead_hours != 3 && lead_hours != 6 && lead_hours != 24) {
    throw InvalidArgument("lead_hours must be one of 1, 3, 6, 24 (got " + std::to_string(lead_hours) + ")");
  }
}

void to_json(json& j, const ForecasterConfig& c) {
  const auto& e = c.embed;
  j = json{{"grid", c.grid},
           {"inventory", c.inventory},
           {"embed",
            {{"surface_stride", e.surface_stride},
             {"surface_kernel", e.surface_kernel},
             {"pressure_stride", e.pressure_stride},
             {"pressure_kernel", e.pressure_kernel},
             {"boundary_kernel", e.boundary_kernel},
             {"dim", e.dim},
             {"sliding", e.sliding}}},
           {"depths", c.depths},
           {"heads", c.heads},
           {"window", c.window},
           {"mlp_ratio", c.mlp_ratio},
           {"skip", c.skip},
           {"boundary_width", c.boundary_width},
           {"lead_hours", c.lead_hours}};
}

// Keys absent from `j` keep the value already in `c`, so a partial file
// overlays defaults.
void from_json(const json& j, ForecasterConfig& c) {
  auto take = [&](const json& src, const char* key, auto& dst) {
    if (src.contains(key)) src.at(key).get_to(dst);
  };
  take(j, "grid", c.grid);
  take(j, "inventory", c.inventory);
  if (j.contains("embed")) {
    const auto& e = j.at("embed");
    take(e, "surface_stride", c.embed.surface_stride);
    take(e, "surface_kernel", c.embed.surface_kernel);
    take(e, "pressure_stride", c.embed.pressure_stride);
    take(e, "pressure_kernel", c.embed.pressure_kernel);
    take(e, "boundary_kernel", c.embed.boundary_kernel);
    take(e, "dim", c.embed.dim);
    take(e, "sliding", c.embed.sliding);
  }
  take(j, "depths", c.depths);
  take(j, "heads", c.heads);
  take(j, "window", c.window);
  take(j, "mlp_ratio", c.mlp_ratio);
  take(j, "skip", c.skip);
  take(j, "boundary_width", c.boundary_width);
  take(j, "lead_hours", c.lead_hours);
}

json ForecasterConfig::architecture_json() const {
  json j = *this;
  j.erase("lead_hours");
  return j;
}

std::string ForecasterConfig::fingerprint() const {
  auto text = architecture_json().dump();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text.data(), text.size())));
  return buf;
}

// ---------------------------------------------------------------------------
// Embeddings

PatchEmbed2dImpl::PatchEmbed2dImpl(int64_t in, int64_t dim, std::array<int, 2> kernel_,
                                   std::array<int, 2> stride_)
    : kernel(kernel_), stride(stride_) {
  proj = register_module(
      "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, dim, {kernel[0], kernel[1]})
                                    .stride({stride[0], stride[1]})));
}

torch::Tensor PatchEmbed2dImpl::forward(const torch::Tensor& x) {
  auto [h_lo, h_hi] = patch_padding(x.size(2), kernel[0], stride[0]);
  auto [w_lo, w_hi] = patch_padding(x.size(3), kernel[1], stride[1]);
  return proj(replicate_pad(x, {w_lo, w_hi, h_lo, h_hi}));
}

PatchEmbed3dImpl::PatchEmbed3dImpl(int64_t in, int64_t dim, std::array<int, 3> kernel_,
                                   std::array<int, 3> stride_)
    : kernel(kernel_), stride(stride_) {
  proj = register_module(
      "proj", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, dim, {kernel[0], kernel[1], kernel[2]})
                                    .stride({stride[0], stride[1], stride[2]})));
}

torch::Tensor PatchEmbed3dImpl::forward(const torch::Tensor& x) {
  auto [z_lo, z_hi] = patch_padding(x.size(2), kernel[0], stride[0]);
  auto [h_lo, h_hi] = patch_padding(x.size(3), kernel[1], stride[1]);
  auto [w_lo, w_hi] = patch_padding(x.size(4), kernel[2], stride[2]);
  return proj(replicate_pad(x, {w_lo, w_hi, h_lo, h_hi, z_lo, z_hi}));
}

// ---------------------------------------------------------------------------
// Window attention

WindowAttentionImpl::WindowAttentionImpl(int64_t dim_, int64_t heads_, std::array<int, 3> window_)
    : dim(dim_), heads(heads_), window(window_) {
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  int64_t n_rel = int64_t(2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
  bias_table = register_parameter("bias_table", torch::zeros({n_rel, heads}));
  torch::NoGradGuard guard;
  trunc_normal_(bias_table, 0.02);
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, bool shifted) {
  const int64_t B = x.size(0), D = x.size(4);
  std::array<int64_t, 3> n{x.size(1), x.size(2), x.size(3)}, w{}, s{}, np{}, nb{};
  for (int i = 0; i < 3; ++i) {
    w[i] = std::min<int64_t>(window[i], n[i]);
    np[i] = ceil_div(n[i], w[i]) * w[i];
    nb[i] = np[i] / w[i];
    s[i] = (shifted && n[i] > window[i]) ? w[i] / 2 : 0;
  }
  const int64_t N = w[0] * w[1] * w[2], nW = nb[0] * nb[1] * nb[2];
  auto iopt = torch::TensorOptions().dtype(torch::kLong);

  auto xp = x;
  auto valid = torch::ones({n[0], n[1], n[2]}, iopt);
  for (int i = 0; i < 3; ++i) {
    xp = pad_tail(xp, 1 + i, np[i] - n[i], pad_fill, pad_constant);
    valid = pad_tail(valid, i, np[i] - n[i], PadFill::kZeros);
  }
  const bool any_shift = s[0] || s[1] || s[2];
  if (any_shift) {
    xp = torch::roll(xp, {-s[0], -s[1], -s[2]}, {1, 2, 3});
    valid = torch::roll(valid, {-s[0], -s[1], -s[2]}, {0, 1, 2});
  }

  // Region label in the rolled frame: bit i is set on the last s[i] positions
  // of axis i, which hold content wrapped around from the start.
  auto label = torch::zeros({np[0], np[1], np[2]}, iopt);
  for (int i = 0; i < 3; ++i) {
    if (!s[i]) continue;
    auto on = (torch::arange(np[i], iopt) >= np[i] - s[i]).to(torch::kLong) * (int64_t(1) << i);
    std::vector<int64_t> shape{1, 1, 1};
    shape[i] = np[i];
    label = label + on.view(shape);
  }

  auto to_windows = [&](const torch::Tensor& t, int64_t lead, int64_t c) {
    // t: [lead, Zp, Hp, Wp, c] -> [lead * nW, N, c]
    return t.view({lead, nb[0], w[0], nb[1], w[1], nb[2], w[2], c})
        .permute({0, 1, 3, 5, 2, 4, 6, 7})
        .reshape({lead * nW, N, c});
  };
  auto lw = to_windows(label.unsqueeze(0).unsqueeze(-1), 1, 1).squeeze(-1);  // [nW, N]
  auto vw = to_windows(valid.unsqueeze(0).unsqueeze(-1), 1, 1).squeeze(-1);
  auto allowed = lw.unsqueeze(2).eq(lw.unsqueeze(1)).logical_and(vw.unsqueeze(1).gt(0));
  auto mask = torch::zeros({nW, N, N}, x.options()).masked_fill(allowed.logical_not(), -1e9);

  // Relative position bias for the effective window.
  auto coords = torch::stack(torch::meshgrid({torch::arange(w[0], iopt), torch::arange(w[1], iopt),
                                              torch::arange(w[2], iopt)},
                                             "ij"))
                    .view({3, N});
  auto rel = coords.unsqueeze(2) - coords.unsqueeze(1);  // [3, N, N]
  auto idx = (rel[0] + (window[0] - 1)) * ((2 * window[1] - 1) * (2 * window[2] - 1)) +
             (rel[1] + (window[1] - 1)) * (2 * window[2] - 1) + (rel[2] + (window[2] - 1));
  auto bias = bias_table.index_select(0, idx.flatten()).view({N, N, heads}).permute({2, 0, 1});

  const int64_t hd = D / heads;
  auto qkv_w = qkv(to_windows(xp, B, D)).view({B * nW, N, 3, heads, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv_w[0] * (1.0 / std::sqrt(double(hd)));
  auto attn = torch::matmul(q, qkv_w[1].transpose(-2, -1)) + bias.unsqueeze(0);
  attn = (attn.view({B, nW, heads, N, N}) + mask.view({1, nW, 1, N, N})).softmax(-1);
  auto out = torch::matmul(attn.view({B * nW, heads, N, N}), qkv_w[2])
                 .transpose(1, 2)
                 .reshape({B * nW, N, D});
  out = proj(out)
            .view({B, nb[0], nb[1], nb[2], w[0], w[1], w[2], D})
            .permute({0, 1, 4, 2, 5, 3, 6, 7})
            .reshape({B, np[0], np[1], np[2], D});
  if (any_shift) out = torch::roll(out, {s[0], s[1], s[2]}, {1, 2, 3});
  return out.index({Slice(), Slice(0, n[0]), Slice(0, n[1]), Slice(0, n[2])});
}

SwinBlockImpl::SwinBlockImpl(int64_t dim, int64_t heads, std::array<int, 3> window, bool shifted_,
                             double mlp_ratio)
    : shifted(shifted_) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", WindowAttention(dim, heads, window));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  mlp = register_module("mlp", Mlp(dim, int64_t(std::lround(dim * mlp_ratio))));
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
  auto y = x + attn(norm1(x), shifted);
  return y + mlp(norm2(y));
}

// ---------------------------------------------------------------------------
// Resampling

PatchMergeImpl::PatchMergeImpl(int64_t dim) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({4 * dim})));
  reduce = register_module("reduce", torch::nn::Linear(torch::nn::LinearOptions(4 * dim, 2 * dim).bias(false)));
}

torch::Tensor PatchMergeImpl::forward(const torch::Tensor& x) {
  auto xp = pad_tail(x, 2, x.size(2) % 2, PadFill::kReplicate);
  xp = pad_tail(xp, 3, xp.size(3) % 2, PadFill::kReplicate);
  const int64_t B = xp.size(0), Z = xp.size(1), H = xp.size(2) / 2, W = xp.size(3) / 2, D = xp.size(4);
  // [B, Z, H, 2, W, 2, D] -> [B, Z, H, W, (2, 2, D)]
  auto m = xp.view({B, Z, H, 2, W, 2, D}).permute({0, 1, 2, 4, 3, 5, 6}).reshape({B, Z, H, W, 4 * D});
  return reduce(norm(m));
}

PatchExpandImpl::PatchExpandImpl(int64_t dim_) : dim(dim_) {
  expand = register_module("expand", torch::nn::Linear(torch::nn::LinearOptions(2 * dim, 4 * dim).bias(false)));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor PatchExpandImpl::forward(const torch::Tensor& x, int64_t h, int64_t w) {
  const int64_t B = x.size(0), Z = x.size(1), H = x.size(2), W = x.size(3);
  auto e = expand(x).view({B, Z, H, W, 2, 2, dim}).permute({0, 1, 2, 4, 3, 5, 6}).reshape({B, Z, 2 * H, 2 * W, dim});
  return norm(e.index({Slice(), Slice(), Slice(0, h), Slice(0, w)}));
}

// ---------------------------------------------------------------------------
// Forecaster

ForecasterImpl::ForecasterImpl(ForecasterConfig cfg_) : cfg(std::move(cfg_)) {
  cfg.validate();
  const auto& e = cfg.embed;
  const int64_t D = e.dim, Z = cfg.token_grid()[0];
  const int64_t ns = cfg.inventory.n_surface(), np = cfg.inventory.n_pressure_vars();

  surface_embed = register_module("surface_embed", PatchEmbed2d(ns + 1, D, e.surface_kernel_eff(), e.surface_stride));
  pressure_embed = register_module("pressure_embed", PatchEmbed3d(np, D, e.pressure_kernel_eff(), e.pressure_stride));
  auto bk = e.boundary_kernel_eff(cfg.boundary_width);
  boundary_proj = register_module(
      "boundary_proj",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.inventory.channels(), D * Z, {bk[0], bk[1]})
                            .stride({cfg.boundary_width, e.surface_stride[0]})));
  null_token = register_parameter("null_token", torch::zeros({D}));

  auto make_layer = [&](int layer) {
    torch::nn::ModuleList list;
    for (int b = 0; b < cfg.depths[layer - 1]; ++b) {
      list->push_back(SwinBlock(cfg.layer_dim(layer), cfg.heads[layer - 1], cfg.window, b % 2 == 1, cfg.mlp_ratio));
    }
    return list;
  };
  layer1 = register_module("layer1", make_layer(1));
  down = register_module("down", PatchMerge(D));
  layer2 = register_module("layer2", make_layer(2));
  up = register_module("up", PatchExpand(D));
  layer3 = register_module("layer3", make_layer(3));

  const int64_t d3 = cfg.layer_dim(3);
  const int64_t sh = e.surface_stride[0], sw = e.surface_stride[1], sz = e.pressure_stride[0];
  out_norm = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d3})));
  surface_head = register_module("surface_head", torch::nn::Linear(d3, ns * sh * sw));
  pressure_head = register_module("pressure_head", torch::nn::Linear(d3, np * sz * sh * sw));

  init_transformer_weights(*this);
  torch::NoGradGuard guard;
  trunc_normal_(null_token, 0.02);
}

torch::Tensor ForecasterImpl::embed_inputs(const torch::Tensor& x, const torch::Tensor& topography) {
  const auto& inv = cfg.inventory;
  const int64_t H = cfg.grid.n_lat, W = cfg.grid.n_lon;
  check_shape(x.dim() == 4 && x.size(1) == inv.channels() && x.size(2) == H && x.size(3) == W,
              "forecaster input " + shape_str(x) + " does not match [B, " + std::to_string(inv.channels()) +
                  ", " + std::to_string(H) + ", " + std::to_string(W) + "]");
  check_shape(topography.dim() == 2 && topography.size(0) == H && topography.size(1) == W,
              "topography " + shape_str(topography) + " does not match the grid");
  const int64_t B = x.size(0), ns = inv.n_surface(), L = inv.n_levels(), P = inv.n_pressure_vars();

  auto topo = topography.to(x.options()).expand({B, 1, H, W});
  auto surf = surface_embed(torch::cat({x.narrow(1, 0, ns), topo}, 1));  // [B, D, Hl, Wl]
  auto pres = pressure_embed(x.narrow(1, ns, L * P).reshape({B, L, P, H, W}).permute({0, 2, 1, 3, 4}));
  return torch::cat({surf.permute({0, 2, 3, 1}).unsqueeze(1), pres.permute({0, 2, 3, 4, 1})}, 1);
}

torch::Tensor ForecasterImpl::embed_boundary(const torch::Tensor& strip) {
  const int64_t H = cfg.grid.n_lat, W = cfg.grid.n_lon, C = cfg.inventory.channels();
  const int64_t width = cfg.boundary_width;
  check_shape(strip.dim() == 4 && strip.size(1) == C && strip.size(2) == width && strip.size(3) == 2 * H + 2 * W,
              "boundary " + shape_str(strip) + " does not match [B, " + std::to_string(C) + ", " +
                  std::to_string(width) + ", " + std::to_string(2 * H + 2 * W) + "]");
  const auto [Z, hl, wl] = cfg.token_grid();
  const int64_t B = strip.size(0), D = cfg.embed.dim;
  const int64_t s = cfg.embed.surface_stride[0];
  auto bk = cfg.embed.boundary_kernel_eff(cfg.boundary_width);
  auto [w_lo, w_hi] = patch_padding(width, bk[0], width);
  const int64_t o_lo = (bk[1] - s) / 2, o_hi = (bk[1] - s) - o_lo;

  // Row strips gain one token on each side so the ring corners are covered;
  // column strips tile the interior rows only.
  auto rows = torch::cat({strip.narrow(3, 0, W), strip.narrow(3, W, W)}, 0);
  auto cols = torch::cat({strip.narrow(3, 2 * W, H), strip.narrow(3, 2 * W + H, H)}, 0);
  rows = replicate_pad(rows, {s + o_lo, (wl + 1) * s - W + o_hi, w_lo, w_hi});
  cols = replicate_pad(cols, {o_lo, hl * s - H + o_hi, w_lo, w_hi});
  auto er = boundary_proj(rows);  // [2B, D*Z, 1, wl + 2]
  auto ec = boundary_proj(cols);  // [2B, D*Z, 1, hl]
  auto to_tokens = [&](const torch::Tensor& t) {
    const int64_t n = t.size(3);
    return t.view({t.size(0), Z, D, n}).permute({0, 1, 3, 2});  // [2B, Z, n, D]
  };
  auto r = to_tokens(er), c = to_tokens(ec);
  return torch::cat({r.narrow(0, 0, B), r.narrow(0, B, B), c.narrow(0, 0, B), c.narrow(0, B, B)}, 2);
}

int64_t ForecasterImpl::boundary_token_count() const {
  auto [z, hl, wl] = cfg.token_grid();
  return z * (2 * (wl + 2) + 2 * hl);
}

torch::Tensor ForecasterImpl::attach_boundary(const torch::Tensor& tokens, const torch::Tensor& boundary_tokens) {
  const int64_t B = tokens.size(0), Z = tokens.size(1), Hl = tokens.size(2), Wl = tokens.size(3), D = tokens.size(4);
  torch::Tensor bt = boundary_tokens;
  if (!bt.defined()) {
    bt = null_token.to(tokens.dtype()).view({1, 1, 1, D}).expand({B, Z, 2 * (Wl + 2) + 2 * Hl, D});
  }
  check_shape(bt.dim() == 4 && bt.size(0) == B && bt.size(1) == Z && bt.size(2) == 2 * (Wl + 2) + 2 * Hl,
              "boundary tokens " + shape_str(bt) + " do not fit the token grid");
  auto top = bt.narrow(2, 0, Wl + 2);
  auto bottom = bt.narrow(2, Wl + 2, Wl + 2);
  auto left = bt.narrow(2, 2 * (Wl + 2), Hl);
  auto right = bt.narrow(2, 2 * (Wl + 2) + Hl, Hl);
  auto middle = torch::cat({left.unsqueeze(3), tokens, right.unsqueeze(3)}, 3);
  return torch::cat({top.unsqueeze(2), middle, bottom.unsqueeze(2)}, 2);
}

torch::Tensor ForecasterImpl::run_layer(torch::nn::ModuleList& layer, torch::Tensor x, const std::string& name) {
  for (size_t i = 0; i < layer->size(); ++i) {
    x = layer->at<SwinBlockImpl>(i).forward(x);
    if (check_finite_values) check_finite(x, name + ".block" + std::to_string(i));
  }
  return x;
}

torch::Tensor ForecasterImpl::recover(const torch::Tensor& tokens) {
  const auto& inv = cfg.inventory;
  const auto& e = cfg.embed;
  const int64_t B = tokens.size(0), Z = tokens.size(1), Hl = tokens.size(2) - 2, Wl = tokens.size(3) - 2;
  const int64_t H = cfg.grid.n_lat, W = cfg.grid.n_lon, L = inv.n_levels();
  const int64_t ns = inv.n_surface(), P = inv.n_pressure_vars();
  const int64_t sh = e.surface_stride[0], sw = e.surface_stride[1], sz = e.pressure_stride[0];

  auto t = out_norm(tokens.index({Slice(), Slice(), Slice(1, Hl + 1), Slice(1, Wl + 1)}));
  auto surf = surface_head(t.select(1, 0))
                  .view({B, Hl, Wl, ns, sh, sw})
                  .permute({0, 3, 1, 4, 2, 5})
                  .reshape({B, ns, Hl * sh, Wl * sw})
                  .index({Slice(), Slice(), Slice(0, H), Slice(0, W)});
  const int64_t Zp = Z - 1;
  auto pres = pressure_head(t.narrow(1, 1, Zp))
                  .view({B, Zp, Hl, Wl, P, sz, sh, sw})
                  .permute({0, 4, 1, 5, 2, 6, 3, 7})
                  .reshape({B, P, Zp * sz, Hl * sh, Wl * sw})
                  .index({Slice(), Slice(), Slice(0, L), Slice(0, H), Slice(0, W)})
                  .permute({0, 2, 1, 3, 4})
                  .reshape({B, L * P, H, W});
  return torch::cat({surf, pres}, 1);
}

torch::Tensor ForecasterImpl::forward(const torch::Tensor& x, const torch::Tensor& strip,
                                      const torch::Tensor& topography) {
  auto tokens = embed_inputs(x, topography);
  auto bt = strip.defined() ? embed_boundary(strip) : torch::Tensor();
  auto t = attach_boundary(tokens, bt);
  if (check_finite_values) check_finite(t, "embed");
  auto t1 = run_layer(layer1, t, "layer1");
  auto t2 = down(t1);
  t2 = run_layer(layer2, t2, "layer2");
  auto t3 = up(t2, t1.size(2), t1.size(3));
  if (cfg.skip) t3 = torch::cat({t3, t1}, -1);
  t3 = run_layer(layer3, t3, "layer3");
  auto out = recover(t3);
  if (check_finite_values) check_finite(out, "recovery");
  return out;
}

void ForecasterImpl::set_pad_fill(PadFill fill, double constant) {
  for (auto* layer : {&layer1, &layer2, &layer3}) {
    for (size_t i = 0; i < (*layer)->size(); ++i) {
      auto& attn = (*layer)->at<SwinBlockImpl>(i).attn;
      attn->pad_fill = fill;
      attn->pad_constant = constant;
    }
  }
}

WeatherState predict(Forecaster& model, const WeatherState& input, const std::optional<BoundaryStrip>& boundary,
                     const torch::Tensor& topography) {
  const auto& cfg = model->cfg;
  if (!input.normalized) throw InvalidArgument("predict: input state must be normalized");
  input.validate(cfg.grid, cfg.inventory);
  const Timestamp target = input.time + cfg.lead_hours;
  const auto dtype = model->null_token.scalar_type();
  torch::Tensor strip;
  if (boundary) {
    if (boundary->time != target) {
      throw InvalidArgument("predict: boundary valid at " + boundary->time.iso() + " but target time is " +
                            target.iso());
    }
    if (boundary->n_lat != cfg.grid.n_lat || boundary->n_lon != cfg.grid.n_lon) {
      throw ShapeError("predict: boundary grid does not match the model grid");
    }
    strip = boundary->values.unsqueeze(0).to(dtype);
  }
  torch::NoGradGuard guard;
  auto out = model->forward(input.values.unsqueeze(0).to(dtype), strip, topography);
  return WeatherState{out.squeeze(0), target, true};
}

}  // namespace regcast
