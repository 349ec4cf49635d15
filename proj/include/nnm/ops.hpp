#pragma once

#include <optional>
#include <type_traits>

#include "nnm/tensor.hpp"

namespace nnm {

enum class Mode { train, eval };

enum class ActivationKind { relu, relu6, silu, prelu };

const char* to_string(ActivationKind kind);
ActivationKind parse_activation(const std::string& name);

/// Running statistics of a batch-norm layer. Starts at mean 0, var 1, which is
/// also what eval mode uses before any training step.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace ops {

// Non-deduced, so std::nullopt or a plain tensor can be passed directly.
template <typename T>
using OptionalTensor = std::optional<std::type_identity_t<Tensor<T>>>;

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

// Cross-correlation. input [N,Cin,H,W], weight [Cout,Cin/groups,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const OptionalTensor<T>& bias, Conv2dParams params);

// Normalizes per channel over (N,H,W). Train mode uses batch statistics and
// updates `state` as run = (1-momentum)*run + momentum*batch, with the
// unbiased batch variance; eval mode uses `state` only.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, double momentum = kBatchNormMomentum,
                      double eps = kBatchNormEps);

// `slope` is required for prelu (a single learnable value) and ignored otherwise.
template <typename T>
Tensor<T> activation(const Tensor<T>& input, ActivationKind kind,
                     const OptionalTensor<T>& slope = std::nullopt);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

// [N,C,H,W] -> [N,C,1,1]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

// input [N,F], weight [O,F], bias [O] -> [N,O]
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape dims);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise product of two same-shape tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& input, T scale);

// Elementwise product with a constant of the same shape (no gradient flows
// into `mask`). Dropout is built on this.
template <typename T>
Tensor<T> mul_mask(const Tensor<T>& input, std::span<const T> mask);

// x [N,C,H,W] scaled per (n,c) by s, where s has N*C elements ([N,C] or [N,C,1,1]).
template <typename T>
Tensor<T> broadcast_mul_channels(const Tensor<T>& x, const Tensor<T>& s);

// Sum of all elements -> [1]
template <typename T>
Tensor<T> sum(const Tensor<T>& input);

// Mean over the batch of -sum_k y_k log softmax(z)_k. Rows of `soft_targets`
// must sum to 1 within 1e-6.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& soft_targets);

// Row-wise softmax of [N,K] values (no graph).
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t classes);

}  // namespace ops
}  // namespace nnm
