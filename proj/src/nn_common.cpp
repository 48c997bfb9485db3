#include "regcast/nn_common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numeric>

#include "regcast/error.hpp"

namespace regcast {

MlpImpl::MlpImpl(int64_t dim, int64_t hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) {
  return fc2(torch::gelu(fc1(x)));
}

void trunc_normal_(torch::Tensor t, double std) {
  torch::NoGradGuard guard;
  const double lo = 0.5 * std::erfc(2.0 / std::sqrt(2.0));  // Phi(-2)
  t.uniform_(2.0 * lo - 1.0, 1.0 - 2.0 * lo).erfinv_().mul_(std * std::sqrt(2.0)).clamp_(-2.0 * std, 2.0 * std);
}

void init_transformer_weights(torch::nn::Module& m) {
  torch::NoGradGuard guard;
  for (auto& child : m.modules(/*include_self=*/false)) {
    if (auto* lin = child->as<torch::nn::Linear>()) {
      trunc_normal_(lin->weight, 0.02);
      if (lin->bias.defined()) lin->bias.zero_();
    } else if (auto* ln = child->as<torch::nn::LayerNorm>()) {
      if (ln->weight.defined()) ln->weight.fill_(1.0);
      if (ln->bias.defined()) ln->bias.zero_();
    }
  }
}

torch::Tensor replicate_pad(const torch::Tensor& x, const std::vector<int64_t>& pads) {
  bool any = false;
  for (auto p : pads) any = any || p != 0;
  if (!any) return x;
  namespace F = torch::nn::functional;
  return F::pad(x, F::PadFuncOptions(pads).mode(torch::kReplicate));
}

std::pair<int64_t, int64_t> patch_padding(int64_t n, int64_t kernel, int64_t stride) {
  int64_t round_up = ceil_div(n, stride) * stride - n;
  int64_t overhang = kernel - stride;
  return {overhang / 2, overhang - overhang / 2 + round_up};
}

double parameter_checksum(const torch::nn::Module& m) {
  torch::NoGradGuard guard;
  double s = 0.0;
  for (const auto& p : m.parameters()) s += p.to(torch::kDouble).pow(2).sum().item<double>();
  return s;
}

int64_t parameter_count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

void copy_state(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard guard;
  auto sp = src.named_parameters();
  for (auto& p : dst.named_parameters()) {
    auto* s = sp.find(p.key());
    if (!s) throw InvalidArgument("copy_state: missing parameter " + p.key());
    p.value().copy_(*s);
  }
  auto sb = src.named_buffers();
  for (auto& b : dst.named_buffers()) {
    auto* s = sb.find(b.key());
    if (!s) throw InvalidArgument("copy_state: missing buffer " + b.key());
    b.value().copy_(*s);
  }
}

std::uint64_t step_seed(std::uint64_t seed, std::int64_t step) {
  std::uint64_t z = (seed ^ 0xD1B54A32D192ED03ull) + 0x9E3779B97F4A7C15ull * (std::uint64_t(step) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

torch::Generator make_generator(std::uint64_t seed) {
  return at::detail::createCPUGenerator(seed);
}

int64_t norm_groups(int64_t channels) { return std::gcd(channels, int64_t(32)); }

void check_finite(const torch::Tensor& x, const std::string& where) {
  if (!torch::isfinite(x).all().item<bool>()) {
    throw NumericalError("non-finite values at " + where);
  }
}

}  // namespace regcast
