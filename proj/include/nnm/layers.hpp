#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nnm/ops.hpp"
#include "nnm/rng.hpp"

namespace nnm {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // receives weight decay (conv / linear weights only)
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  // Trainable tensors, in a fixed order.
  virtual void collect_parameters(const std::string& prefix,
                                  std::vector<NamedTensor<T>>& out) = 0;
  // Non-trainable state (batch-norm running statistics).
  virtual void collect_buffers(const std::string&, std::vector<NamedTensor<T>>&) {}
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         ops::Conv2dParams params, bool with_bias, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  ops::Conv2dParams params;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;
};

template <typename T>
class Activation : public Module<T> {
 public:
  explicit Activation(ActivationKind kind);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  ActivationKind kind;
  std::optional<Tensor<T>> slope;  // prelu only, starts at 0.25
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;
};

/// Squeeze-and-excitation: s = sigmoid(fc2(act(fc1(gap(x))))), out = x * s
/// per channel.
template <typename T>
class SEBlock : public Module<T> {
 public:
  SEBlock(std::size_t channels, std::size_t reduction, ActivationKind inner, Rng& rng);

  static std::size_t hidden_width(std::size_t channels, std::size_t reduction);

  Tensor<T> forward(const Tensor<T>& x) const;
  // The per-(n,c) gate values in (0,1), shape [N,C].
  Tensor<T> gate(const Tensor<T>& x) const;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  std::size_t channels;
  Linear<T> fc1;
  Activation<T> act;
  Linear<T> fc2;
};

enum class DropoutMode { spatial, regular };

const char* to_string(DropoutMode mode);
DropoutMode parse_dropout_mode(const std::string& name);

/// Inverted dropout. Spatial mode drops whole (n,c) feature maps; regular
/// mode drops single elements. Kept values are scaled by 1/(1-p).
template <typename T>
class Dropout {
 public:
  Dropout(DropoutMode mode, double rate);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) const;
  // The multiplicative mask forward would apply in train mode.
  std::vector<T> sample_mask(const Shape& dims, Rng& rng) const;

  DropoutMode mode;
  double rate;
};

// Where the in-block dropout sits. 1: after the expansion activation,
// 2: after SE, 3: after the projection (before the residual add).
enum class DropoutSite { none = 0, after_expand = 1, after_se = 2, after_project = 3 };

DropoutSite dropout_site_from_int(int position);

template <typename T>
class Block : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) = 0;
  virtual std::size_t in_channels() const = 0;
  virtual std::size_t out_channels() const = 0;
  virtual std::size_t stride() const = 0;
};

struct BlockOptions {
  std::size_t in_channels = 16;
  std::size_t out_channels = 16;
  std::size_t stride = 1;
  std::size_t expansion = 6;
  bool se = true;
  std::size_t se_reduction = 12;
  ActivationKind activation = ActivationKind::relu6;
  ActivationKind se_activation = ActivationKind::relu6;
  DropoutSite dropout_site = DropoutSite::after_project;
  DropoutMode dropout_mode = DropoutMode::spatial;
  double dropout_rate = 0.2;
};

/// Inverted linear residual block:
///   expand 1x1 (skipped when expansion == 1) -> BN -> act -> [drop@1]
///   -> depthwise 3x3 (stride) -> BN -> act -> SE -> [drop@2]
///   -> project 1x1 -> BN -> [drop@3] -> + x when stride == 1 and in == out.
/// No activation follows the projection.
template <typename T>
class ILRB : public Block<T> {
 public:
  ILRB(const BlockOptions& options, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) override;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  std::size_t in_channels() const override { return options.in_channels; }
  std::size_t out_channels() const override { return options.out_channels; }
  std::size_t stride() const override { return options.stride; }
  std::size_t hidden_channels() const { return options.expansion * options.in_channels; }
  bool has_skip() const {
    return options.stride == 1 && options.in_channels == options.out_channels;
  }

  BlockOptions options;
  std::unique_ptr<Conv2d<T>> expand_conv;  // null when expansion == 1
  std::unique_ptr<BatchNorm2d<T>> expand_bn;
  std::unique_ptr<Activation<T>> expand_act;
  Conv2d<T> depthwise_conv;
  BatchNorm2d<T> depthwise_bn;
  Activation<T> depthwise_act;
  std::unique_ptr<SEBlock<T>> se;
  Conv2d<T> project_conv;
  BatchNorm2d<T> project_bn;
  Dropout<T> dropout;
};

/// Post-activation residual block used as the ablation baseline:
/// conv3x3 -> BN -> act -> conv3x3 -> BN, plus a (projected) shortcut, then act.
/// Dropout sites 1 and 2 both sit after the first activation.
template <typename T>
class PlainResidual : public Block<T> {
 public:
  PlainResidual(const BlockOptions& options, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng) override;
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) override;

  std::size_t in_channels() const override { return options.in_channels; }
  std::size_t out_channels() const override { return options.out_channels; }
  std::size_t stride() const override { return options.stride; }

  BlockOptions options;
  Conv2d<T> conv1;
  BatchNorm2d<T> bn1;
  Activation<T> act1;
  Conv2d<T> conv2;
  BatchNorm2d<T> bn2;
  std::unique_ptr<Conv2d<T>> shortcut_conv;
  std::unique_ptr<BatchNorm2d<T>> shortcut_bn;
  Activation<T> act_out;
  Dropout<T> dropout;
};

}  // namespace nnm
