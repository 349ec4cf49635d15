#include "nnm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "nnm/layers.hpp"
#include "nnm/ops.hpp"
#include "nnm/rng.hpp"

namespace nnm {

double check_gradients(GradCheckProblem& problem, const GradCheckOptions& options,
                       std::string* worst) {
  for (auto& [name, t] : problem.inputs) {
    if (t.has_grad()) t.zero_grad();
  }
  backward(problem.loss());

  double max_err = 0.0;
  const double h = options.step;
  for (auto& [name, t] : problem.inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.size() != t.numel()) {
      throw ContractError("gradcheck: input '" + name + "' received no gradient");
    }
    double scale = 0.0;
    for (double a : analytic) scale = std::max(scale, std::abs(a));
    const double floor = std::max(options.relative_floor * scale, options.absolute_floor);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double original = t[i];
      double plus, minus;
      {
        NoGradGuard guard;
        t[i] = original + h;
        plus = problem.loss().item();
        t[i] = original - h;
        minus = problem.loss().item();
        t[i] = original;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > max_err || std::isnan(err)) {
        max_err = std::isnan(err) ? INFINITY : err;
        if (worst) *worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return max_err;
}

std::vector<GradCheckResult> run_gradcheck(const std::vector<GradCheckCase>& cases,
                                           const GradCheckOptions& options) {
  std::vector<GradCheckResult> results;
  for (const auto& c : cases) {
    GradCheckResult r;
    r.op = c.op;
    for (int s = 0; s < options.seeds; ++s) {
      auto problem = c.make(static_cast<std::uint64_t>(s));
      std::string where;
      const double err = check_gradients(problem, options, &where);
      if (err >= r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = "seed " + std::to_string(s) + " " + where;
      }
      ++r.trials;
    }
    r.passed = r.max_rel_error < options.tolerance;
    results.push_back(std::move(r));
  }
  return results;
}

namespace {

using TensorD = Tensor<double>;

TensorD random_tensor(Rng& rng, Shape dims, double lo = -1.0, double hi = 1.0, bool grad = true) {
  TensorD t(std::move(dims));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  if (grad) t.set_requires_grad(true);
  return t;
}

// Values with magnitude in [0.1, 2] and random sign, so the central
// difference never straddles the kink of a piecewise-linear op at 0.
TensorD away_from_zero(Rng& rng, Shape dims) {
  TensorD t(std::move(dims));
  for (auto& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 2.0);
  t.set_requires_grad(true);
  return t;
}

// loss = sum(r * out) with a fixed random projection r.
std::function<TensorD()> projected(std::function<TensorD()> f, std::uint64_t seed) {
  auto probe = std::make_shared<TensorD>();
  return [f = std::move(f), probe, seed]() {
    auto out = f();
    if (!probe->defined() || probe->dims() != out.dims()) {
      Rng rng = Rng::derive(seed, {0x9a0be});
      *probe = random_tensor(rng, out.dims(), -1.0, 1.0, false);
    }
    return ops::sum(ops::mul(out, *probe));
  };
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

GradCheckCase conv_case() {
  return {"conv2d", [](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {1});
            const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 4);
            const bool depthwise = rng.bernoulli(0.4);
            const std::size_t groups = depthwise ? cin : 1;
            const std::size_t cout = depthwise ? cin : pick(rng, 1, 4);
            const std::size_t k = rng.bernoulli(0.7) ? 3 : 1;
            const std::size_t stride = pick(rng, 1, 2), pad = k == 3 ? pick(rng, 0, 1) : 0;
            const std::size_t hw = pick(rng, 3, 6);
            auto x = random_tensor(rng, {n, cin, hw, hw});
            auto w = random_tensor(rng, {cout, cin / groups, k, k});
            std::optional<TensorD> b;
            if (rng.bernoulli(0.5)) b = random_tensor(rng, {cout});
            GradCheckProblem p;
            p.inputs = {{"input", x}, {"weight", w}};
            if (b) p.inputs.push_back({"bias", *b});
            p.loss = projected([=] { return ops::conv2d(x, w, b, {stride, pad, groups}); }, seed);
            return p;
          }};
}

GradCheckCase batchnorm_case(Mode mode) {
  return {mode == Mode::train ? "batchnorm2d_train" : "batchnorm2d_eval",
          [mode](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {2});
            const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3), hw = pick(rng, 2, 4);
            auto x = random_tensor(rng, {n, c, hw, hw}, -2.0, 2.0);
            auto gamma = random_tensor(rng, {c}, 0.5, 1.5);
            auto beta = random_tensor(rng, {c});
            auto state = std::make_shared<BatchNormState<double>>(c);
            for (std::size_t i = 0; i < c; ++i) {
              state->running_mean[i] = rng.uniform(-0.5, 0.5);
              state->running_var[i] = rng.uniform(0.5, 2.0);
            }
            GradCheckProblem p;
            p.inputs = {{"input", x}, {"gamma", gamma}, {"beta", beta}};
            p.loss = projected(
                [=] {
                  // Eval mode must not see the running stats drift, so each
                  // evaluation works on a copy.
                  BatchNormState<double> s = *state;
                  s.running_mean = state->running_mean.clone();
                  s.running_var = state->running_var.clone();
                  return ops::batchnorm2d(x, gamma, beta, s, mode);
                },
                seed);
            return p;
          }};
}

GradCheckCase activation_case(ActivationKind kind) {
  return {to_string(kind), [kind](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {3, static_cast<std::uint64_t>(kind)});
            const Shape dims{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
            auto x = away_from_zero(rng, dims);
            if (kind == ActivationKind::relu6) {
              // Also cover the upper clamp; keep clear of 6.
              for (auto& v : x.data())
                if (rng.bernoulli(0.3)) v = rng.bernoulli(0.5) ? rng.uniform(6.1, 7.5) : rng.uniform(4.5, 5.9);
            }
            GradCheckProblem p;
            p.inputs = {{"input", x}};
            std::optional<TensorD> slope;
            if (kind == ActivationKind::prelu) {
              slope = random_tensor(rng, {1}, 0.05, 0.5);
              p.inputs.push_back({"slope", *slope});
            }
            p.loss = projected([=] { return ops::activation(x, kind, slope); }, seed);
            return p;
          }};
}

GradCheckCase unary_case(std::string name, std::function<TensorD(const TensorD&)> op) {
  return {name, [name, op](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {4, std::hash<std::string>{}(name)});
            const Shape dims{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
            auto x = random_tensor(rng, dims, -3.0, 3.0);
            GradCheckProblem p;
            p.inputs = {{"input", x}};
            p.loss = projected([=] { return op(x); }, seed);
            return p;
          }};
}

GradCheckCase linear_case() {
  return {"linear", [](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {5});
            const std::size_t n = pick(rng, 1, 4), f = pick(rng, 1, 6), o = pick(rng, 1, 5);
            auto x = random_tensor(rng, {n, f});
            auto w = random_tensor(rng, {o, f});
            auto b = random_tensor(rng, {o});
            GradCheckProblem p;
            p.inputs = {{"input", x}, {"weight", w}, {"bias", b}};
            p.loss = projected([=] { return ops::linear(x, w, b); }, seed);
            return p;
          }};
}

GradCheckCase binary_case(std::string name,
                          std::function<TensorD(const TensorD&, const TensorD&)> op) {
  return {name, [name, op](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {6, std::hash<std::string>{}(name)});
            const Shape dims{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
            auto a = random_tensor(rng, dims);
            auto b = random_tensor(rng, dims);
            GradCheckProblem p;
            p.inputs = {{"a", a}, {"b", b}};
            p.loss = projected([=] { return op(a, b); }, seed);
            return p;
          }};
}

GradCheckCase mask_case() {
  return {"mul_mask", [](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {7});
            const Shape dims{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)};
            auto x = random_tensor(rng, dims);
            Dropout<double> drop(rng.bernoulli(0.5) ? DropoutMode::spatial : DropoutMode::regular, 0.3);
            auto mask = std::make_shared<std::vector<double>>(drop.sample_mask(dims, rng));
            GradCheckProblem p;
            p.inputs = {{"input", x}};
            p.loss = projected([=] { return ops::mul_mask<double>(x, *mask); }, seed);
            return p;
          }};
}

GradCheckCase channel_scale_case() {
  return {"broadcast_mul_channels", [](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {8});
            const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4);
            auto x = random_tensor(rng, {n, c, pick(rng, 1, 4), pick(rng, 1, 4)});
            auto s = random_tensor(rng, rng.bernoulli(0.5) ? Shape{n, c} : Shape{n, c, 1, 1});
            GradCheckProblem p;
            p.inputs = {{"x", x}, {"scale", s}};
            p.loss = projected([=] { return ops::broadcast_mul_channels(x, s); }, seed);
            return p;
          }};
}

GradCheckCase cross_entropy_case() {
  return {"softmax_cross_entropy", [](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {9});
            const std::size_t n = pick(rng, 1, 4), k = pick(rng, 2, 6);
            auto z = random_tensor(rng, {n, k}, -3.0, 3.0);
            TensorD y(Shape{n, k});
            for (std::size_t i = 0; i < n; ++i) {
              double total = 0;
              for (std::size_t j = 0; j < k; ++j) total += (y[i * k + j] = rng.uniform(0.05, 1.0));
              for (std::size_t j = 0; j < k; ++j) y[i * k + j] /= total;
            }
            GradCheckProblem p;
            p.inputs = {{"logits", z}};
            p.loss = [=] { return ops::softmax_cross_entropy(z, y); };
            return p;
          }};
}

// Composite blocks use SiLU so that the central difference never crosses a
// kink of a piecewise-linear activation somewhere inside the block; the
// piecewise-linear ops are covered individually above.
//
// Parameters are redrawn with magnitudes in [0.5, 1.5]/sqrt(fan_in), so every
// weight row has norm near 1: batch norm makes the loss scale-invariant in the
// preceding weights with curvature ~ 1/|w|^2, and rows of small norm would
// let truncation error dominate.
void expose(GradCheckProblem& p, Module<double>& m, Rng& rng) {
  std::vector<NamedTensor<double>> params;
  m.collect_parameters("", params);
  for (auto& nt : params) {
    const bool is_gamma = nt.name.ends_with("gamma");
    const auto& t = nt.tensor;
    const double fan_in = t.rank() > 1 ? double(t.numel() / t.dim(0)) : 1.0;
    for (auto& v : nt.tensor.data()) {
      const double magnitude = rng.uniform(0.5, 1.5) / std::sqrt(fan_in);
      v = is_gamma || rng.bernoulli(0.5) ? magnitude : -magnitude;
    }
    p.inputs.push_back({nt.name, nt.tensor});
  }
}

GradCheckCase se_case() {
  return {"se_block", [](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {10});
            const std::size_t n = pick(rng, 1, 3), c = pick(rng, 2, 8);
            auto x = random_tensor(rng, {n, c, pick(rng, 1, 4), pick(rng, 1, 4)});
            auto se = std::make_shared<SEBlock<double>>(c, pick(rng, 1, 4), ActivationKind::silu, rng);
            GradCheckProblem p;
            p.inputs = {{"x", x}};
            expose(p, *se, rng);
            p.loss = projected([=] { return se->forward(x); }, seed);
            return p;
          }};
}

GradCheckCase block_case(std::string name, bool ilrb) {
  return {name, [ilrb](std::uint64_t seed) {
            Rng rng = Rng::derive(seed, {11, ilrb});
            BlockOptions o;
            o.in_channels = pick(rng, 2, 4);
            o.expansion = rng.bernoulli(0.5) ? 1 : 6;
            o.stride = pick(rng, 1, 2);
            o.out_channels = rng.bernoulli(0.5) ? o.in_channels : pick(rng, 2, 5);
            o.se_reduction = 4;
            o.activation = ActivationKind::silu;
            o.se_activation = ActivationKind::silu;
            o.dropout_site = dropout_site_from_int(static_cast<int>(pick(rng, 0, 3)));
            o.dropout_mode = rng.bernoulli(0.5) ? DropoutMode::spatial : DropoutMode::regular;
            o.dropout_rate = 0.25;
            const Mode mode = rng.bernoulli(0.7) ? Mode::train : Mode::eval;
            std::shared_ptr<Block<double>> block;
            if (ilrb) block = std::make_shared<ILRB<double>>(o, rng);
            else block = std::make_shared<PlainResidual<double>>(o, rng);
            const std::size_t hw = pick(rng, 6, 8);
            auto x = random_tensor(rng, {pick(rng, 3, 4), o.in_channels, hw, hw});
            GradCheckProblem p;
            p.inputs = {{"x", x}};
            expose(p, *block, rng);
            p.loss = projected(
                [=] {
                  // Same dropout masks on every evaluation.
                  Rng drop_rng = Rng::derive(seed, {12});
                  return block->forward(x, mode, drop_rng);
                },
                seed);
            return p;
          }};
}

}  // namespace

std::vector<GradCheckCase> standard_gradcheck_cases() {
  return {
      conv_case(),
      batchnorm_case(Mode::train),
      batchnorm_case(Mode::eval),
      activation_case(ActivationKind::relu),
      activation_case(ActivationKind::relu6),
      activation_case(ActivationKind::silu),
      activation_case(ActivationKind::prelu),
      unary_case("sigmoid", [](const TensorD& x) { return ops::sigmoid(x); }),
      unary_case("global_avg_pool", [](const TensorD& x) { return ops::global_avg_pool(x); }),
      unary_case("reshape",
                 [](const TensorD& x) { return ops::reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)}); }),
      unary_case("mul_scalar", [](const TensorD& x) { return ops::mul_scalar(x, -1.7); }),
      unary_case("sum", [](const TensorD& x) { return ops::sum(x); }),
      linear_case(),
      binary_case("add", [](const TensorD& a, const TensorD& b) { return ops::add(a, b); }),
      binary_case("mul", [](const TensorD& a, const TensorD& b) { return ops::mul(a, b); }),
      mask_case(),
      channel_scale_case(),
      cross_entropy_case(),
      se_case(),
      block_case("ilrb", true),
      block_case("plain_residual", false),
  };
}

}  // namespace nnm
