#include "nnm/ops.hpp"

#include <algorithm>
#include <cmath>

namespace nnm {

const char* to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::relu6: return "relu6";
    case ActivationKind::silu: return "silu";
    case ActivationKind::prelu: return "prelu";
  }
  return "?";
}

ActivationKind parse_activation(const std::string& name) {
  if (name == "relu") return ActivationKind::relu;
  if (name == "relu6") return ActivationKind::relu6;
  if (name == "silu") return ActivationKind::silu;
  if (name == "prelu") return ActivationKind::prelu;
  throw ConfigError("unknown activation '" + name + "'");
}

namespace ops {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n && n->needs_grad();
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.dims()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                         shape_str(b.dims()));
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

// Output columns ow for which ow*stride - pad + k lands inside [0, extent).
struct Span1d {
  std::size_t lo, hi;
};

Span1d valid_outputs(std::size_t out_extent, std::size_t in_extent, std::size_t stride,
                     std::size_t pad, std::size_t k) {
  // ow*stride + k >= pad  and  ow*stride + k < in_extent + pad
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  std::size_t hi = 0;
  if (in_extent + pad > k) hi = (in_extent + pad - k - 1) / stride + 1;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const OptionalTensor<T>& bias, Conv2dParams params) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  const std::size_t n_batch = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c_out = weight.dim(0), c_group = weight.dim(1), kh = weight.dim(2),
                    kw = weight.dim(3);
  const std::size_t groups = params.groups, stride = params.stride, pad = params.padding;
  if (groups == 0 || stride == 0) throw DimensionError("conv2d: groups and stride must be positive");
  if (c_in % groups != 0 || c_out % groups != 0 || c_group != c_in / groups) {
    throw DimensionError("conv2d: channels " + std::to_string(c_in) + "->" + std::to_string(c_out) +
                         " incompatible with groups=" + std::to_string(groups) + " and weight " +
                         shape_str(weight.dims()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != c_out)) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(c_out) + "]");
  }
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(input.dims()));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t cout_per_group = c_out / groups;

  std::vector<T> out(n_batch * c_out * ho * wo, T(0));
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t oc = 0; oc < c_out; ++oc) {
      T* oplane = out.data() + (n * c_out + oc) * ho * wo;
      if (bias) std::fill(oplane, oplane + ho * wo, (*bias)[oc]);
      const std::size_t g = oc / cout_per_group;
      for (std::size_t icg = 0; icg < c_group; ++icg) {
        const T* xplane = x + (n * c_in + g * c_group + icg) * h * w;
        for (std::size_t ki = 0; ki < kh; ++ki) {
          const auto rows = valid_outputs(ho, h, stride, pad, ki);
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const T wv = wt[((oc * c_group + icg) * kh + ki) * kw + kj];
            const auto cols = valid_outputs(wo, w, stride, pad, kj);
            for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
              const T* xrow = xplane + (oh * stride + ki - pad) * w;
              T* orow = oplane + oh * wo;
              for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
                orow[ow] += wv * xrow[ow * stride + kj - pad];
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor<T>> parents{input, weight};
  if (bias) parents.push_back(*bias);
  auto xn = input.node();
  auto wn = weight.node();
  NodePtr<T> bn = bias ? bias->node() : nullptr;
  return detail::make_result<T>(
      "conv2d", Shape{n_batch, c_out, ho, wo}, std::move(out), std::move(parents),
      [=](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        const T* xv = xn->data.data();
        const T* wv_all = wn->data.data();
        T* dx = wants_grad(xn) ? xn->grad_buffer().data() : nullptr;
        T* dw = wants_grad(wn) ? wn->grad_buffer().data() : nullptr;
        if (wants_grad(bn)) {
          T* db = bn->grad_buffer().data();
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t oc = 0; oc < c_out; ++oc) {
              const T* plane = dy + (n * c_out + oc) * ho * wo;
              T acc = 0;
              for (std::size_t i = 0; i < ho * wo; ++i) acc += plane[i];
              db[oc] += acc;
            }
        }
        if (!dx && !dw) return;
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t oc = 0; oc < c_out; ++oc) {
            const T* gplane = dy + (n * c_out + oc) * ho * wo;
            const std::size_t g = oc / cout_per_group;
            for (std::size_t icg = 0; icg < c_group; ++icg) {
              const std::size_t plane_off = (n * c_in + g * c_group + icg) * h * w;
              for (std::size_t ki = 0; ki < kh; ++ki) {
                const auto rows = valid_outputs(ho, h, stride, pad, ki);
                for (std::size_t kj = 0; kj < kw; ++kj) {
                  const std::size_t widx = ((oc * c_group + icg) * kh + ki) * kw + kj;
                  const T wv = wv_all[widx];
                  const auto cols = valid_outputs(wo, w, stride, pad, kj);
                  T wacc = 0;
                  for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
                    const std::size_t row_off = plane_off + (oh * stride + ki - pad) * w;
                    const T* grow = gplane + oh * wo;
                    const T* xrow = xv + row_off;
                    if (dx) {
                      T* dxrow = dx + row_off;
                      for (std::size_t ow = cols.lo; ow < cols.hi; ++ow)
                        dxrow[ow * stride + kj - pad] += wv * grow[ow];
                    }
                    if (dw) {
                      for (std::size_t ow = cols.lo; ow < cols.hi; ++ow)
                        wacc += grow[ow] * xrow[ow * stride + kj - pad];
                    }
                  }
                  if (dw) dw[widx] += wacc;
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, double momentum, double eps) {
  require_rank(input, 4, "batchnorm2d", "input");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1),
                    plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&state.running_mean),
                             static_cast<const Tensor<T>*>(&state.running_var)}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw DimensionError("batchnorm2d: per-channel tensor " + shape_str(t->dims()) +
                           " does not match " + std::to_string(channels) + " channels");
    }
  }
  if (!(eps > 0)) throw ContractError("batchnorm2d: eps must be positive");

  const std::size_t count = n_batch * plane;
  const T* x = input.data().data();
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto inv_std = std::make_shared<std::vector<T>>(channels);
  std::vector<T> out(input.numel());

  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* p = x + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / double(count);
      double ss = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* p = x + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / double(count);
      const double unbiased = count > 1 ? ss / double(count - 1) : var;
      auto& rm = state.running_mean[c];
      auto& rv = state.running_var[c];
      rm = T((1.0 - momentum) * rm + momentum * mean);
      rv = T((1.0 - momentum) * rv + momentum * unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T istd = T(1.0 / std::sqrt(var + eps));
    (*inv_std)[c] = istd;
    const T g = gamma[c], b = beta[c], m = T(mean);
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (x[off + i] - m) * istd;
        (*xhat)[off + i] = xh;
        out[off + i] = g * xh + b;
      }
    }
  }

  auto xn = input.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      "batchnorm2d", input.dims(), std::move(out), {input, gamma, beta},
      [=](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        T* dx = wants_grad(xn) ? xn->grad_buffer().data() : nullptr;
        T* dg = wants_grad(gn) ? gn->grad_buffer().data() : nullptr;
        T* db = wants_grad(bn) ? bn->grad_buffer().data() : nullptr;
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < n_batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * (*xhat)[off + i];
            }
          }
          if (dg) dg[c] += sum_dy_xhat;
          if (db) db[c] += sum_dy;
          if (!dx) continue;
          const T g = gn->data[c], istd = (*inv_std)[c];
          if (mode == Mode::train) {
            const T scale = g * istd / T(count);
            for (std::size_t n = 0; n < n_batch; ++n) {
              const std::size_t off = (n * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                dx[off + i] += scale * (T(count) * dy[off + i] - sum_dy - (*xhat)[off + i] * sum_dy_xhat);
              }
            }
          } else {
            const T scale = g * istd;
            for (std::size_t n = 0; n < n_batch; ++n) {
              const std::size_t off = (n * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) dx[off + i] += scale * dy[off + i];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& input, ActivationKind kind,
                     const OptionalTensor<T>& slope) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  T a = 0;
  if (kind == ActivationKind::prelu) {
    if (!slope || slope->numel() != 1) throw DimensionError("prelu: slope must be a single value");
    a = slope->item();
  }
  switch (kind) {
    case ActivationKind::relu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case ActivationKind::relu6:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::min(std::max(x[i], T(0)), T(6));
      break;
    case ActivationKind::silu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid_scalar(x[i]);
      break;
    case ActivationKind::prelu:
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : a * x[i];
      break;
  }

  std::vector<Tensor<T>> parents{input};
  NodePtr<T> sn;
  if (kind == ActivationKind::prelu) {
    parents.push_back(*slope);
    sn = slope->node();
  }
  auto xn = input.node();
  return detail::make_result<T>(
      std::string(to_string(kind)), input.dims(), std::move(out), std::move(parents),
      [=](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        const auto& xv = xn->data;
        if (wants_grad(xn)) {
          T* dx = xn->grad_buffer().data();
          for (std::size_t i = 0; i < xv.size(); ++i) {
            const T v = xv[i];
            T d = 0;
            switch (kind) {
              case ActivationKind::relu: d = v > T(0) ? T(1) : T(0); break;
              case ActivationKind::relu6: d = (v > T(0) && v < T(6)) ? T(1) : T(0); break;
              case ActivationKind::silu: {
                const T s = sigmoid_scalar(v);
                d = s * (T(1) + v * (T(1) - s));
                break;
              }
              case ActivationKind::prelu: d = v > T(0) ? T(1) : a; break;
            }
            dx[i] += d * dy[i];
          }
        }
        if (wants_grad(sn)) {
          T acc = 0;
          for (std::size_t i = 0; i < xv.size(); ++i)
            if (!(xv[i] > T(0))) acc += dy[i] * xv[i];
          sn->grad_buffer()[0] += acc;
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  auto xn = input.node();
  return detail::make_result<T>("sigmoid", input.dims(), std::move(out), {input},
                                [xn](detail::Node<T>& self) {
                                  if (!wants_grad(xn)) return;
                                  T* dx = xn->grad_buffer().data();
                                  for (std::size_t i = 0; i < self.data.size(); ++i) {
                                    const T y = self.data[i];
                                    dx[i] += self.grad[i] * y * (T(1) - y);
                                  }
                                });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t nc = input.dim(0) * input.dim(1), plane = input.dim(2) * input.dim(3);
  std::vector<T> out(nc);
  const T* x = input.data().data();
  for (std::size_t i = 0; i < nc; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
    out[i] = s / T(plane);
  }
  auto xn = input.node();
  return detail::make_result<T>("global_avg_pool", Shape{input.dim(0), input.dim(1), 1, 1},
                                std::move(out), {input}, [=](detail::Node<T>& self) {
                                  if (!wants_grad(xn)) return;
                                  T* dx = xn->grad_buffer().data();
                                  for (std::size_t i = 0; i < nc; ++i) {
                                    const T g = self.grad[i] / T(plane);
                                    for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] += g;
                                  }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  const std::size_t n = input.dim(0), f = input.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f || bias.dim(0) != o) {
    throw DimensionError("linear: input " + shape_str(input.dims()) + ", weight " +
                         shape_str(weight.dims()) + ", bias " + shape_str(bias.dims()));
  }
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  std::vector<T> out(n * o);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      T s = bias[j];
      for (std::size_t k = 0; k < f; ++k) s += x[i * f + k] * wt[j * f + k];
      out[i * o + j] = s;
    }
  auto xn = input.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>(
      "linear", Shape{n, o}, std::move(out), {input, weight, bias}, [=](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (wants_grad(xn)) {
          T* dx = xn->grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j)
              for (std::size_t k = 0; k < f; ++k) dx[i * f + k] += dy[i * o + j] * wn->data[j * f + k];
        }
        if (wants_grad(wn)) {
          T* dw = wn->grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j)
              for (std::size_t k = 0; k < f; ++k) dw[j * f + k] += dy[i * o + j] * xn->data[i * f + k];
        }
        if (wants_grad(bn)) {
          T* db = bn->grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j) db[j] += dy[i * o + j];
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape dims) {
  if (shape_numel(dims) != input.numel()) {
    throw DimensionError("reshape: " + shape_str(input.dims()) + " -> " + shape_str(dims));
  }
  auto xn = input.node();
  std::vector<T> values(input.data().begin(), input.data().end());
  return detail::make_result<T>("reshape", std::move(dims), std::move(values), {input},
                                [xn](detail::Node<T>& self) {
                                  if (!wants_grad(xn)) return;
                                  T* dx = xn->grad_buffer().data();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("add", a.dims(), std::move(out), {a, b}, [=](detail::Node<T>& self) {
    for (const auto& p : {an, bn}) {
      if (!wants_grad(p)) continue;
      T* d = p->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("mul", a.dims(), std::move(out), {a, b}, [=](detail::Node<T>& self) {
    if (wants_grad(an)) {
      T* d = an->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bn->data[i];
    }
    if (wants_grad(bn)) {
      T* d = bn->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& input, T scale) {
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input[i] * scale;
  auto xn = input.node();
  return detail::make_result<T>("mul_scalar", input.dims(), std::move(out), {input},
                                [=](detail::Node<T>& self) {
                                  if (!wants_grad(xn)) return;
                                  T* dx = xn->grad_buffer().data();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * scale;
                                });
}

template <typename T>
Tensor<T> mul_mask(const Tensor<T>& input, std::span<const T> mask) {
  if (mask.size() != input.numel()) {
    throw DimensionError("mul_mask: mask size " + std::to_string(mask.size()) + " vs " +
                         shape_str(input.dims()));
  }
  auto saved = std::make_shared<std::vector<T>>(mask.begin(), mask.end());
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input[i] * (*saved)[i];
  auto xn = input.node();
  return detail::make_result<T>("mul_mask", input.dims(), std::move(out), {input},
                                [=](detail::Node<T>& self) {
                                  if (!wants_grad(xn)) return;
                                  T* dx = xn->grad_buffer().data();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * (*saved)[i];
                                });
}

template <typename T>
Tensor<T> broadcast_mul_channels(const Tensor<T>& x, const Tensor<T>& s) {
  require_rank(x, 4, "broadcast_mul_channels", "x");
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  if (s.numel() != nc || s.dim(0) != x.dim(0)) {
    throw DimensionError("broadcast_mul_channels: scale " + shape_str(s.dims()) + " does not match " +
                         shape_str(x.dims()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < plane; ++j) out[i * plane + j] = x[i * plane + j] * s[i];
  auto xn = x.node(), sn = s.node();
  return detail::make_result<T>(
      "broadcast_mul_channels", x.dims(), std::move(out), {x, s}, [=](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (wants_grad(xn)) {
          T* dx = xn->grad_buffer().data();
          for (std::size_t i = 0; i < nc; ++i)
            for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] += dy[i * plane + j] * sn->data[i];
        }
        if (wants_grad(sn)) {
          T* ds = sn->grad_buffer().data();
          for (std::size_t i = 0; i < nc; ++i) {
            T acc = 0;
            for (std::size_t j = 0; j < plane; ++j) acc += dy[i * plane + j] * xn->data[i * plane + j];
            ds[i] += acc;
          }
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T s = 0;
  for (auto v : input.data()) s += v;
  auto xn = input.node();
  return detail::make_result<T>("sum", Shape{1}, {s}, {input}, [xn](detail::Node<T>& self) {
    if (!wants_grad(xn)) return;
    T* dx = xn->grad_buffer().data();
    for (std::size_t i = 0; i < xn->data.size(); ++i) dx[i] += self.grad[0];
  });
}

template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t classes) {
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r * classes < logits.size(); ++r) {
    const T* z = logits.data() + r * classes;
    const T mx = *std::max_element(z, z + classes);
    double s = 0;
    for (std::size_t k = 0; k < classes; ++k) s += std::exp(double(z[k] - mx));
    for (std::size_t k = 0; k < classes; ++k) out[r * classes + k] = T(std::exp(double(z[k] - mx)) / s);
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& soft_targets) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  require_same_shape(logits, soft_targets, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const T* z = logits.data().data();
  const T* y = soft_targets.data().data();
  auto log_probs = std::make_shared<std::vector<double>>(n * k);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < k; ++j) row += y[i * k + j];
    if (std::abs(row - 1.0) > 1e-6) {
      throw ValidationError("softmax_cross_entropy: target row " + std::to_string(i) + " sums to " +
                            std::to_string(row));
    }
    const T* zr = z + i * k;
    const double mx = *std::max_element(zr, zr + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(double(zr[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) {
      const double lp = double(zr[j]) - lse;
      (*log_probs)[i * k + j] = lp;
      loss -= double(y[i * k + j]) * lp;
    }
  }
  loss /= double(n);
  if (!std::isfinite(loss)) throw NumericalError("softmax_cross_entropy: non-finite loss");

  auto zn = logits.node(), yn = soft_targets.node();
  return detail::make_result<T>(
      "softmax_cross_entropy", Shape{1}, {T(loss)}, {logits, soft_targets},
      [=](detail::Node<T>& self) {
        const double g = double(self.grad[0]) / double(n);
        if (wants_grad(zn)) {
          T* dz = zn->grad_buffer().data();
          for (std::size_t i = 0; i < n; ++i) {
            double row = 0;
            for (std::size_t j = 0; j < k; ++j) row += yn->data[i * k + j];
            for (std::size_t j = 0; j < k; ++j) {
              const double p = std::exp((*log_probs)[i * k + j]);
              dz[i * k + j] += T(g * (p * row - double(yn->data[i * k + j])));
            }
          }
        }
        if (wants_grad(yn)) {
          T* dy = yn->grad_buffer().data();
          for (std::size_t i = 0; i < n * k; ++i) dy[i] += T(-g * (*log_probs)[i]);
        }
      });
}

#define NNM_INSTANTIATE_OPS(T)                                                                     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const OptionalTensor<T>&,  \
                            Conv2dParams);                                                         \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                 BatchNormState<T>&, Mode, double, double);                        \
  template Tensor<T> activation(const Tensor<T>&, ActivationKind, const OptionalTensor<T>&); \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_mask(const Tensor<T>&, std::span<const T>);                               \
  template Tensor<T> broadcast_mul_channels(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template std::vector<T> softmax_rows(std::span<const T>, std::size_t);                           \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const Tensor<T>&);

NNM_INSTANTIATE_OPS(float)
NNM_INSTANTIATE_OPS(double)

#undef NNM_INSTANTIATE_OPS

}  // namespace ops
}  // namespace nnm
