#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace regcast {

/// Two-layer GELU perceptron.
struct MlpImpl : torch::nn::Module {
  MlpImpl(int64_t dim, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Mlp);

/// In-place N(0, std^2) truncated to [-2 std, 2 std] (inverse-CDF sampling).
void trunc_normal_(torch::Tensor t, double std);

/// Truncated-normal (std 0.02) Linear weights and zero biases, unit LayerNorms,
/// applied to the descendants of `m` (safe inside a module constructor).
void init_transformer_weights(torch::nn::Module& m);

/// Replicate-pads the last `n` dims of a channels-first tensor.
/// `pads` lists (low, high) pairs starting from the LAST dim.
torch::Tensor replicate_pad(const torch::Tensor& x, const std::vector<int64_t>& pads);

/// Low/high padding that makes a strided kernel emit ceil(n / stride)
/// outputs: round n up to a stride multiple, then split the kernel overhang
/// (kernel - stride) as floor/ceil halves.
std::pair<int64_t, int64_t> patch_padding(int64_t n, int64_t kernel, int64_t stride);

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

/// Sum of squares of all parameter values; stable parameter checksum.
double parameter_checksum(const torch::nn::Module& m);
int64_t parameter_count(const torch::nn::Module& m);

/// Copies parameter and buffer values from `src` into `dst` (same structure).
void copy_state(const torch::nn::Module& src, torch::nn::Module& dst);

/// CPU random generator with a fixed seed, independent of the global one.
torch::Generator make_generator(std::uint64_t seed);

/// Independent stream seed for training step `step` of a run seeded with
/// `seed` (splitmix64 finalizer), so a resumed run draws what an
/// uninterrupted one would.
std::uint64_t step_seed(std::uint64_t seed, std::int64_t step);

/// GroupNorm group count for `channels` (gcd with 32).
int64_t norm_groups(int64_t channels);

/// Throws NumericalError naming `where` if `x` has NaN/Inf.
void check_finite(const torch::Tensor& x, const std::string& where);

}  // namespace regcast
