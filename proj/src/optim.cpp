#include "nnm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nnm/errors.hpp"

namespace nnm {

const char* to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::adamp: return "adamp";
    case OptimizerKind::adamw: return "adamw";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sgd: return "sgd";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adamp") return OptimizerKind::adamp;
  if (name == "adamw") return OptimizerKind::adamw;
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + name + "' (adamp|adamw|adam|sgd)");
}

namespace adamp {

template <typename T>
std::vector<double> row_cosines(std::span<const T> w, std::span<const T> g, std::size_t row_dim, double eps) {
  const std::size_t rows = w.size() / row_dim;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double wg = 0, ww = 0, gg = 0;
    for (std::size_t i = r * row_dim; i < (r + 1) * row_dim; ++i) {
      wg += double(w[i]) * double(g[i]);
      ww += double(w[i]) * double(w[i]);
      gg += double(g[i]) * double(g[i]);
    }
    out[r] = std::abs(wg) / (std::sqrt(ww) * std::sqrt(gg) + eps);
  }
  return out;
}

template <typename T>
ProjectionInfo project(std::span<const T> w, std::span<const T> g, std::span<T> p, const Shape& dims,
                       double delta, double eps) {
  ProjectionInfo info;
  if (dims.size() < 2) return info;
  const std::size_t numel = w.size();
  for (bool channel : {true, false}) {
    const std::size_t row_dim = channel ? numel / dims[0] : numel;
    const auto cos = row_cosines(w, g, row_dim, eps);
    info.channel_view = channel;
    info.max_cos = *std::max_element(cos.begin(), cos.end());
    info.threshold = delta / std::sqrt(double(row_dim));
    if (!(info.max_cos < info.threshold)) continue;
    info.fired = true;
    for (std::size_t r = 0; r < numel / row_dim; ++r) {
      const std::size_t lo = r * row_dim, hi = lo + row_dim;
      double norm = 0;
      for (std::size_t i = lo; i < hi; ++i) norm += double(w[i]) * double(w[i]);
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;  // no direction to project out
      double dot = 0;
      for (std::size_t i = lo; i < hi; ++i) dot += double(w[i]) / norm * double(p[i]);
      for (std::size_t i = lo; i < hi; ++i) p[i] = T(double(p[i]) - dot * double(w[i]) / norm);
    }
    return info;
  }
  return info;
}

}  // namespace adamp

template <typename T>
ProjectionInfo update_tensor(OptimizerKind kind, const OptimizerHyper& hp, double lr, bool decay,
                             std::uint64_t t, const Shape& dims, std::span<T> w, std::span<const T> g,
                             ParamState<T>& s) {
  const std::size_t n = w.size();
  const double lambda = decay ? hp.weight_decay : 0.0;
  ProjectionInfo info;
  if (s.m.size() != n) s.m.assign(n, T(0));

  if (kind == OptimizerKind::sgd) {
    // coupled decay; the first step seeds the buffer with the gradient
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = double(g[i]) + lambda * double(w[i]);
      const double buf = t == 1 ? gi : hp.momentum * double(s.m[i]) + gi;
      s.m[i] = T(buf);
      const double d = hp.nesterov ? gi + hp.momentum * buf : buf;
      w[i] = T(double(w[i]) - lr * d);
    }
    return info;
  }

  if (s.v.size() != n) s.v.assign(n, T(0));
  const double bc1 = 1.0 - std::pow(hp.beta1, double(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, double(t));
  std::vector<T> gc(g.begin(), g.end());
  if (kind == OptimizerKind::adam)
    for (std::size_t i = 0; i < n; ++i) gc[i] = T(double(gc[i]) + lambda * double(w[i]));

  std::vector<T> p(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = hp.beta1 * double(s.m[i]) + (1.0 - hp.beta1) * double(gc[i]);
    const double v = hp.beta2 * double(s.v[i]) + (1.0 - hp.beta2) * double(gc[i]) * double(gc[i]);
    s.m[i] = T(m);
    s.v[i] = T(v);
    const double mt = hp.nesterov ? hp.beta1 * m + (1.0 - hp.beta1) * double(gc[i]) : m;
    p[i] = T((mt / bc1) / (std::sqrt(v / bc2) + hp.eps));
  }

  double ratio = 1.0;
  if (kind == OptimizerKind::adamp) {
    info = adamp::project<T>(std::span<const T>(w.data(), n), std::span<const T>(gc), std::span<T>(p), dims,
                             hp.delta, hp.eps);
    if (info.fired) ratio = hp.wd_ratio;
  }
  const double shrink = kind == OptimizerKind::adam ? 1.0 : 1.0 - lr * lambda * ratio;
  for (std::size_t i = 0; i < n; ++i) w[i] = T(double(w[i]) * shrink - lr * double(p[i]));
  return info;
}

template <typename T>
Optimizer<T>::Optimizer(OptimizerKind kind, OptimizerHyper hyper, std::vector<NamedTensor<T>> params)
    : kind_(kind), hyper_(hyper), params_(std::move(params)), state_(params_.size()), last_(params_.size()) {
  if (hyper_.beta1 < 0 || hyper_.beta1 >= 1 || hyper_.beta2 < 0 || hyper_.beta2 >= 1)
    throw ConfigError("optimizer betas must lie in [0,1)");
  if (hyper_.eps <= 0) throw ConfigError("optimizer eps must be > 0");
  if (hyper_.weight_decay < 0) throw ConfigError("weight decay must be >= 0");
}

template <typename T>
void Optimizer<T>::step(double lr) {
  if (!std::isfinite(lr) || lr < 0) throw NumericalError("invalid learning rate");
  for (const auto& p : params_)
    if (p.tensor.has_grad() && !all_finite(p.tensor.grad()))
      throw NumericalError("non-finite gradient in " + p.name + "; step rejected");
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    last_[i] = update_tensor<T>(kind_, hyper_, lr, p.decay, t_, p.tensor.dims(), p.tensor.data(),
                                p.tensor.grad(), state_[i]);
  }
}

template <typename T>
void Optimizer<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Schedule::validate() const {
  if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
  if (min_lr < 0 || min_lr > base_lr) throw ConfigError("min_lr must lie in [0, base_lr]");
  if (total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
    throw ConfigError("warmup_epochs must lie in [0, total_epochs)");
}

double lr_at(const Schedule& s, int epoch) {
  s.validate();
  if (epoch < 0 || epoch > s.total_epochs) {
    throw ContractError("epoch " + std::to_string(epoch) + " outside [0," + std::to_string(s.total_epochs) + "]");
  }
  if (epoch < s.warmup_epochs) return s.base_lr * (double(epoch + 1) / double(s.warmup_epochs));
  const double progress = double(epoch - s.warmup_epochs) / double(s.total_epochs - s.warmup_epochs);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

#define NNM_INSTANTIATE_OPTIM(T)                                                                            \
  template std::vector<double> adamp::row_cosines(std::span<const T>, std::span<const T>, std::size_t,     \
                                                  double);                                                 \
  template ProjectionInfo adamp::project(std::span<const T>, std::span<const T>, std::span<T>, const Shape&, \
                                         double, double);                                                  \
  template ProjectionInfo update_tensor(OptimizerKind, const OptimizerHyper&, double, bool, std::uint64_t, \
                                        const Shape&, std::span<T>, std::span<const T>, ParamState<T>&);   \
  template class Optimizer<T>;

NNM_INSTANTIATE_OPTIM(float)
NNM_INSTANTIATE_OPTIM(double)

#undef NNM_INSTANTIATE_OPTIM

}  // namespace nnm
