#include "nnm/layers.hpp"

#include <cmath>

namespace nnm {

const char* to_string(DropoutMode mode) {
  return mode == DropoutMode::spatial ? "spatial" : "regular";
}

DropoutMode parse_dropout_mode(const std::string& name) {
  if (name == "spatial") return DropoutMode::spatial;
  if (name == "regular") return DropoutMode::regular;
  throw ConfigError("unknown dropout mode '" + name + "'");
}

DropoutSite dropout_site_from_int(int position) {
  if (position < 0 || position > 3) {
    throw ConfigError("dropout position must be 0 (none) or 1-3, got " + std::to_string(position));
  }
  return static_cast<DropoutSite>(position);
}

namespace {

template <typename T>
void add_named(std::vector<NamedTensor<T>>& out, const std::string& prefix, const std::string& name,
               const Tensor<T>& t, bool decay) {
  out.push_back({prefix + name, t, decay});
}

}  // namespace

// ---- Conv2d ----------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                  ops::Conv2dParams p, bool with_bias, Rng& rng)
    : params(p) {
  if (p.groups == 0 || in_channels % p.groups != 0 || out_channels % p.groups != 0) {
    throw ConfigError("conv: channels not divisible by groups");
  }
  weight = Tensor<T>(Shape{out_channels, in_channels / p.groups, kernel, kernel});
  // Kaiming normal, fan-out mode.
  const double stddev = std::sqrt(2.0 / double(out_channels * kernel * kernel));
  for (auto& v : weight.data()) v = T(rng.normal(0.0, stddev));
  weight.set_requires_grad(true);
  if (with_bias) {
    bias = Tensor<T>(Shape{out_channels}, T(0));
    bias->set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, bias, params);
}

template <typename T>
void Conv2d<T>::collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  add_named(out, prefix, "weight", weight, true);
  if (bias) add_named(out, prefix, "bias", *bias, false);
}

// ---- BatchNorm2d -------------------------------------------------------------

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma(Shape{channels}, T(1)), beta(Shape{channels}, T(0)), state(channels) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode) {
  return ops::batchnorm2d(x, gamma, beta, state, mode);
}

template <typename T>
void BatchNorm2d<T>::collect_parameters(const std::string& prefix,
                                        std::vector<NamedTensor<T>>& out) {
  add_named(out, prefix, "gamma", gamma, false);
  add_named(out, prefix, "beta", beta, false);
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  add_named(out, prefix, "running_mean", state.running_mean, false);
  add_named(out, prefix, "running_var", state.running_var, false);
}

// ---- Activation --------------------------------------------------------------

template <typename T>
Activation<T>::Activation(ActivationKind k) : kind(k) {
  if (kind == ActivationKind::prelu) {
    slope = Tensor<T>(Shape{1}, T(0.25));
    slope->set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Activation<T>::forward(const Tensor<T>& x) const {
  return ops::activation(x, kind, slope);
}

template <typename T>
void Activation<T>::collect_parameters(const std::string& prefix,
                                       std::vector<NamedTensor<T>>& out) {
  if (slope) add_named(out, prefix, "slope", *slope, false);
}

// ---- Linear ------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : weight(Shape{out_features, in_features}), bias(Shape{out_features}) {
  const double bound = 1.0 / std::sqrt(double(in_features));
  for (auto& v : weight.data()) v = T(rng.uniform(-bound, bound));
  for (auto& v : bias.data()) v = T(rng.uniform(-bound, bound));
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ops::linear(x, weight, bias);
}

template <typename T>
void Linear<T>::collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  add_named(out, prefix, "weight", weight, true);
  add_named(out, prefix, "bias", bias, false);
}

// ---- SEBlock -----------------------------------------------------------------

template <typename T>
std::size_t SEBlock<T>::hidden_width(std::size_t channels, std::size_t reduction) {
  if (reduction == 0) throw ConfigError("SE reduction must be positive");
  return std::max<std::size_t>(channels / reduction, 4);
}

template <typename T>
SEBlock<T>::SEBlock(std::size_t c, std::size_t reduction, ActivationKind inner, Rng& rng)
    : channels(c),
      fc1(c, hidden_width(c, reduction), rng),
      act(inner),
      fc2(hidden_width(c, reduction), c, rng) {}

template <typename T>
Tensor<T> SEBlock<T>::gate(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw DimensionError("SE block expects " + std::to_string(channels) + " channels, got " +
                         shape_str(x.dims()));
  }
  const std::size_t n = x.dim(0);
  auto squeezed = ops::reshape(ops::global_avg_pool(x), Shape{n, channels});
  return ops::sigmoid(fc2.forward(act.forward(fc1.forward(squeezed))));
}

template <typename T>
Tensor<T> SEBlock<T>::forward(const Tensor<T>& x) const {
  return ops::broadcast_mul_channels(x, gate(x));
}

template <typename T>
void SEBlock<T>::collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  fc1.collect_parameters(prefix + "fc1.", out);
  act.collect_parameters(prefix + "act.", out);
  fc2.collect_parameters(prefix + "fc2.", out);
}

// ---- Dropout -----------------------------------------------------------------

template <typename T>
Dropout<T>::Dropout(DropoutMode m, double r) : mode(m), rate(r) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
}

template <typename T>
std::vector<T> Dropout<T>::sample_mask(const Shape& dims, Rng& rng) const {
  const std::size_t numel = shape_numel(dims);
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(numel);
  if (mode == DropoutMode::regular || dims.size() < 3) {
    for (auto& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_scale;
    return mask;
  }
  const std::size_t maps = dims[0] * dims[1];
  const std::size_t plane = numel / maps;
  for (std::size_t i = 0; i < maps; ++i) {
    const T v = rng.bernoulli(rate) ? T(0) : keep_scale;
    std::fill(mask.begin() + i * plane, mask.begin() + (i + 1) * plane, v);
  }
  return mask;
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Mode m, Rng& rng) const {
  if (m == Mode::eval || rate == 0.0) return x;
  const auto mask = sample_mask(x.dims(), rng);
  return ops::mul_mask<T>(x, mask);
}

// ---- ILRB --------------------------------------------------------------------

namespace {

void validate(const BlockOptions& o) {
  if (o.in_channels == 0 || o.out_channels == 0) throw ConfigError("block channels must be >= 1");
  if (o.stride != 1 && o.stride != 2) throw ConfigError("block stride must be 1 or 2");
  if (o.expansion == 0) throw ConfigError("block expansion must be >= 1");
}

}  // namespace

template <typename T>
ILRB<T>::ILRB(const BlockOptions& o, Rng& rng)
    : options((validate(o), o)),
      expand_conv(o.expansion == 1 ? nullptr
                                   : std::make_unique<Conv2d<T>>(
                                         o.in_channels, hidden_channels(), 1,
                                         ops::Conv2dParams{1, 0, 1}, false, rng)),
      expand_bn(o.expansion == 1 ? nullptr : std::make_unique<BatchNorm2d<T>>(hidden_channels())),
      expand_act(o.expansion == 1 ? nullptr : std::make_unique<Activation<T>>(o.activation)),
      depthwise_conv(hidden_channels(), hidden_channels(), 3, {o.stride, 1, hidden_channels()},
                     false, rng),
      depthwise_bn(hidden_channels()),
      depthwise_act(o.activation),
      se(o.se ? std::make_unique<SEBlock<T>>(hidden_channels(), o.se_reduction, o.se_activation,
                                             rng)
              : nullptr),
      project_conv(hidden_channels(), o.out_channels, 1, {1, 0, 1}, false, rng),
      project_bn(o.out_channels),
      dropout(o.dropout_mode, o.dropout_site == DropoutSite::none ? 0.0 : o.dropout_rate) {}

template <typename T>
Tensor<T> ILRB<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  if (x.rank() != 4 || x.dim(1) != options.in_channels) {
    throw DimensionError("ILRB expects " + std::to_string(options.in_channels) +
                         " input channels, got " + shape_str(x.dims()));
  }
  const auto site = options.dropout_site;
  Tensor<T> h = x;
  if (expand_conv) h = expand_act->forward(expand_bn->forward(expand_conv->forward(h), mode));
  if (site == DropoutSite::after_expand) h = dropout.forward(h, mode, rng);
  h = depthwise_act.forward(depthwise_bn.forward(depthwise_conv.forward(h), mode));
  if (se) h = se->forward(h);
  if (site == DropoutSite::after_se) h = dropout.forward(h, mode, rng);
  h = project_bn.forward(project_conv.forward(h), mode);
  if (site == DropoutSite::after_project) h = dropout.forward(h, mode, rng);
  if (has_skip()) h = ops::add(h, x);
  return h;
}

template <typename T>
void ILRB<T>::collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  if (expand_conv) {
    expand_conv->collect_parameters(prefix + "expand.conv.", out);
    expand_bn->collect_parameters(prefix + "expand.bn.", out);
    expand_act->collect_parameters(prefix + "expand.act.", out);
  }
  depthwise_conv.collect_parameters(prefix + "depthwise.conv.", out);
  depthwise_bn.collect_parameters(prefix + "depthwise.bn.", out);
  depthwise_act.collect_parameters(prefix + "depthwise.act.", out);
  if (se) se->collect_parameters(prefix + "se.", out);
  project_conv.collect_parameters(prefix + "project.conv.", out);
  project_bn.collect_parameters(prefix + "project.bn.", out);
}

template <typename T>
void ILRB<T>::collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  if (expand_bn) expand_bn->collect_buffers(prefix + "expand.bn.", out);
  depthwise_bn.collect_buffers(prefix + "depthwise.bn.", out);
  project_bn.collect_buffers(prefix + "project.bn.", out);
}

// ---- PlainResidual -----------------------------------------------------------

template <typename T>
PlainResidual<T>::PlainResidual(const BlockOptions& o, Rng& rng)
    : options((validate(o), o)),
      conv1(o.in_channels, o.out_channels, 3, {o.stride, 1, 1}, false, rng),
      bn1(o.out_channels),
      act1(o.activation),
      conv2(o.out_channels, o.out_channels, 3, {1, 1, 1}, false, rng),
      bn2(o.out_channels),
      act_out(o.activation),
      dropout(o.dropout_mode, o.dropout_site == DropoutSite::none ? 0.0 : o.dropout_rate) {
  if (o.stride != 1 || o.in_channels != o.out_channels) {
    shortcut_conv = std::make_unique<Conv2d<T>>(o.in_channels, o.out_channels, 1,
                                                ops::Conv2dParams{o.stride, 0, 1}, false, rng);
    shortcut_bn = std::make_unique<BatchNorm2d<T>>(o.out_channels);
  }
}

template <typename T>
Tensor<T> PlainResidual<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  if (x.rank() != 4 || x.dim(1) != options.in_channels) {
    throw DimensionError("residual block expects " + std::to_string(options.in_channels) +
                         " input channels, got " + shape_str(x.dims()));
  }
  const auto site = options.dropout_site;
  Tensor<T> h = act1.forward(bn1.forward(conv1.forward(x), mode));
  if (site == DropoutSite::after_expand || site == DropoutSite::after_se) {
    h = dropout.forward(h, mode, rng);
  }
  h = bn2.forward(conv2.forward(h), mode);
  if (site == DropoutSite::after_project) h = dropout.forward(h, mode, rng);
  Tensor<T> shortcut = shortcut_conv ? shortcut_bn->forward(shortcut_conv->forward(x), mode) : x;
  return act_out.forward(ops::add(h, shortcut));
}

template <typename T>
void PlainResidual<T>::collect_parameters(const std::string& prefix,
                                          std::vector<NamedTensor<T>>& out) {
  conv1.collect_parameters(prefix + "conv1.", out);
  bn1.collect_parameters(prefix + "bn1.", out);
  act1.collect_parameters(prefix + "act1.", out);
  conv2.collect_parameters(prefix + "conv2.", out);
  bn2.collect_parameters(prefix + "bn2.", out);
  if (shortcut_conv) {
    shortcut_conv->collect_parameters(prefix + "shortcut.conv.", out);
    shortcut_bn->collect_parameters(prefix + "shortcut.bn.", out);
  }
  act_out.collect_parameters(prefix + "act_out.", out);
}

template <typename T>
void PlainResidual<T>::collect_buffers(const std::string& prefix,
                                       std::vector<NamedTensor<T>>& out) {
  bn1.collect_buffers(prefix + "bn1.", out);
  bn2.collect_buffers(prefix + "bn2.", out);
  if (shortcut_bn) shortcut_bn->collect_buffers(prefix + "shortcut.bn.", out);
}

#define NNM_INSTANTIATE_LAYERS(T) \
  template class Conv2d<T>;       \
  template class BatchNorm2d<T>;  \
  template class Activation<T>;   \
  template class Linear<T>;       \
  template class SEBlock<T>;      \
  template class Dropout<T>;      \
  template class ILRB<T>;         \
  template class PlainResidual<T>;

NNM_INSTANTIATE_LAYERS(float)
NNM_INSTANTIATE_LAYERS(double)

}  // namespace nnm
