#include <cmath>
#include <numeric>

#include "doctest.h"
#include "nnm/ops.hpp"
#include "nnm/rng.hpp"
#include "oracles/conv_reference.hpp"

using namespace nnm;
using TensorD = Tensor<double>;

namespace {

TensorD random_tensor(Rng& rng, Shape dims, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(dims));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> values(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("tensor construction checks extents") {
  TensorD t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t[5] == 1.5);
  CHECK_THROWS_AS(TensorD(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(TensorD(Shape{1, 1, 1, 1, 1}), DimensionError);
  CHECK_THROWS_AS(TensorD(Shape{}), DimensionError);
}

TEST_CASE("conv2d counts overlapped ones with padding") {
  TensorD x(Shape{1, 1, 3, 3}, 1.0), w(Shape{1, 1, 3, 3}, 1.0);
  auto y = ops::conv2d(x, w, std::nullopt, {1, 1, 1});
  REQUIRE(y.dims() == Shape{1, 1, 3, 3});
  CHECK(values(y) == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST_CASE("conv2d with zero kernel is zero") {
  Rng rng(3);
  auto x = random_tensor(rng, {2, 3, 5, 5});
  TensorD w(Shape{4, 3, 3, 3}, 0.0);
  auto y = ops::conv2d(x, w, std::nullopt, {1, 1, 1});
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d strided case matches the direct-loop reference") {
  Rng rng(11);
  auto x = random_tensor(rng, {2, 3, 5, 5});
  auto w = random_tensor(rng, {4, 3, 3, 3});
  auto y = ops::conv2d(x, w, std::nullopt, {2, 1, 1});
  std::size_t ho, wo;
  auto ref = oracle::conv2d_direct(values(x), values(w), nullptr, {2, 3, 5, 5, 4, 3, 3, 2, 1, 1}, ho, wo);
  REQUIRE(y.dims() == Shape{2, 4, ho, wo});
  CHECK(ho == 3);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv2d depthwise and pointwise special cases") {
  Rng rng(5);
  auto x = random_tensor(rng, {1, 4, 6, 6});
  SUBCASE("depthwise filters each channel on its own") {
    auto w = random_tensor(rng, {4, 1, 3, 3});
    auto y = ops::conv2d(x, w, std::nullopt, {1, 1, 4});
    for (std::size_t c = 0; c < 4; ++c) {
      TensorD xc(Shape{1, 1, 6, 6}), wc(Shape{1, 1, 3, 3});
      std::copy_n(x.data().begin() + c * 36, 36, xc.data().begin());
      std::copy_n(w.data().begin() + c * 9, 9, wc.data().begin());
      auto yc = ops::conv2d(xc, wc, std::nullopt, {1, 1, 1});
      for (std::size_t i = 0; i < 36; ++i) CHECK(y[c * 36 + i] == doctest::Approx(yc[i]).epsilon(1e-14));
    }
  }
  SUBCASE("pointwise mixes channels per pixel") {
    auto w = random_tensor(rng, {2, 4, 1, 1});
    auto y = ops::conv2d(x, w, std::nullopt, {1, 0, 1});
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t p = 0; p < 36; ++p) {
        double ref = 0;
        for (std::size_t c = 0; c < 4; ++c) ref += w[o * 4 + c] * x[c * 36 + p];
        CHECK(y[o * 36 + p] == doctest::Approx(ref).epsilon(1e-14));
      }
  }
}

TEST_CASE("conv2d decomposes over input channels") {
  Rng rng(21);
  auto x = random_tensor(rng, {2, 3, 5, 4});
  auto w = random_tensor(rng, {2, 3, 3, 3});
  auto full = ops::conv2d(x, w, std::nullopt, {1, 1, 1});
  std::vector<double> acc(full.numel(), 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    TensorD xc(Shape{2, 1, 5, 4}), wc(Shape{2, 1, 3, 3});
    for (std::size_t n = 0; n < 2; ++n)
      std::copy_n(x.data().begin() + (n * 3 + c) * 20, 20, xc.data().begin() + n * 20);
    for (std::size_t o = 0; o < 2; ++o)
      std::copy_n(w.data().begin() + (o * 3 + c) * 9, 9, wc.data().begin() + o * 9);
    auto part = ops::conv2d(xc, wc, std::nullopt, {1, 1, 1});
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += part[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) CHECK(full[i] == doctest::Approx(acc[i]).epsilon(1e-12));
}

TEST_CASE("conv2d shape errors") {
  TensorD x(Shape{1, 3, 4, 4});
  CHECK_THROWS_AS(ops::conv2d(x, TensorD(Shape{2, 2, 3, 3}), std::nullopt, {1, 1, 1}), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(x, TensorD(Shape{4, 1, 3, 3}), std::nullopt, {1, 1, 2}), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(x, TensorD(Shape{2, 3, 7, 7}), std::nullopt, {1, 1, 1}), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(TensorD(Shape{3, 4, 4}), TensorD(Shape{2, 3, 3, 3}), std::nullopt, {1, 1, 1}),
                  DimensionError);
}

TEST_CASE("batchnorm train mode") {
  SUBCASE("constant channels normalise to zero") {
    TensorD x(Shape{2, 2, 3, 3});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = (i / 9) % 2 == 0 ? 3.0 : -1.0;
    TensorD gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0);
    BatchNormState<double> state(2);
    auto y = ops::batchnorm2d(x, gamma, beta, state, Mode::train);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("gamma zero gives beta") {
    Rng rng(1);
    auto x = random_tensor(rng, {2, 3, 2, 2});
    TensorD gamma(Shape{3}, 0.0), beta(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
    BatchNormState<double> state(3);
    auto y = ops::batchnorm2d(x, gamma, beta, state, Mode::train);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == beta[(i / 4) % 3]);
  }
  SUBCASE("output statistics match gamma and beta") {
    Rng rng(2);
    auto x = random_tensor(rng, {4, 3, 5, 5}, -3.0, 5.0);
    TensorD gamma(Shape{3}, std::vector<double>{0.5, 2.0, 1.5});
    TensorD beta(Shape{3}, std::vector<double>{1.0, -0.5, 0.0});
    BatchNormState<double> state(3);
    auto y = ops::batchnorm2d(x, gamma, beta, state, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) m += y[(n * 3 + c) * 25 + i];
      m /= 100;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) v += std::pow(y[(n * 3 + c) * 25 + i] - m, 2);
      v /= 100;
      CHECK(std::abs(m - beta[c]) < 1e-5);
      CHECK(std::abs(v - gamma[c] * gamma[c]) < 1e-5 * 4);
    }
  }
}

TEST_CASE("batchnorm running statistics") {
  TensorD x(Shape{2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  TensorD gamma(Shape{1}, 1.0), beta(Shape{1}, 0.0);
  BatchNormState<double> state(1);
  ops::batchnorm2d(x, gamma, beta, state, Mode::train);
  // batch mean 2.5, unbiased var 5/3
  CHECK(state.running_mean[0] == doctest::Approx(0.25));
  CHECK(state.running_var[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));

  BatchNormState<double> fresh(1);
  auto y = ops::batchnorm2d(x, gamma, beta, fresh, Mode::eval);
  // mean 0, var 1 before any statistics are recorded
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(x[i] / std::sqrt(1.0 + 1e-5)));
  CHECK(fresh.running_mean[0] == 0.0);
}

TEST_CASE("activations") {
  TensorD x(Shape{3}, std::vector<double>{-1, 3, 8});
  CHECK(values(ops::activation(x, ActivationKind::relu6)) == std::vector<double>{0, 3, 6});
  CHECK(values(ops::activation(x, ActivationKind::relu)) == std::vector<double>{0, 3, 8});
  CHECK(ops::activation(TensorD(Shape{1}, 0.0), ActivationKind::silu)[0] == 0.0);
  CHECK(ops::activation(TensorD(Shape{1}, 2.0), ActivationKind::silu)[0] ==
        doctest::Approx(2.0 / (1.0 + std::exp(-2.0))));
  TensorD slope(Shape{1}, 0.25);
  CHECK(ops::activation(TensorD(Shape{1}, -4.0), ActivationKind::prelu, slope)[0] == -1.0);
  CHECK_THROWS_AS(ops::activation(x, ActivationKind::prelu), DimensionError);
  CHECK(parse_activation("relu6") == ActivationKind::relu6);
  CHECK_THROWS_AS(parse_activation("gelu"), ConfigError);
}

TEST_CASE("global average pool") {
  TensorD x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(ops::global_avg_pool(x)[0] == 2.5);
  CHECK(ops::global_avg_pool(TensorD(Shape{2, 3, 4, 5}, 7.25))[5] == 7.25);

  Rng rng(9);
  auto r = random_tensor(rng, {3, 4, 5, 6});
  auto y = ops::global_avg_pool(r);
  REQUIRE(y.dims() == Shape{3, 4, 1, 1});
  for (std::size_t i = 0; i < 12; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 30; ++j) s += r[i * 30 + j];
    CHECK(std::abs(y[i] - s / 30.0) < 1e-12);
  }
}

TEST_CASE("linear layer") {
  TensorD x(Shape{1, 2}, std::vector<double>{1, 2});
  TensorD w(Shape{2, 2}, std::vector<double>{1, 0, 3, -1});
  TensorD b(Shape{2}, std::vector<double>{0.5, 0.0});
  CHECK(values(ops::linear(x, w, b)) == std::vector<double>{1.5, 1.0});
  CHECK_THROWS_AS(ops::linear(x, TensorD(Shape{2, 3}), b), DimensionError);
}

TEST_CASE("softmax cross-entropy") {
  SUBCASE("uniform logits") {
    TensorD z(Shape{1, 4}, 0.3), y(Shape{1, 4}, std::vector<double>{0, 0, 1, 0});
    CHECK(ops::softmax_cross_entropy(z, y).item() == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  }
  SUBCASE("target equal to the softmax gives its entropy") {
    TensorD z(Shape{1, 3}, std::vector<double>{0.2, -1.0, 2.5});
    auto p = ops::softmax_rows<double>(z.data(), 3);
    double entropy = 0;
    for (double v : p) entropy -= v * std::log(v);
    TensorD y(Shape{1, 3}, p);
    CHECK(ops::softmax_cross_entropy(z, y).item() == doctest::Approx(entropy).epsilon(1e-14));
  }
  SUBCASE("random rows against a long double evaluation") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 1 + rng.below(5), k = 2 + rng.below(6);
      auto z = random_tensor(rng, {n, k}, -20.0, 20.0);
      TensorD y(Shape{n, k});
      for (std::size_t i = 0; i < n; ++i) {
        long double total = 0;
        for (std::size_t j = 0; j < k; ++j) total += (y[i * k + j] = rng.uniform());
        for (std::size_t j = 0; j < k; ++j) y[i * k + j] = double(y[i * k + j] / total);
      }
      long double ref = 0;
      for (std::size_t i = 0; i < n; ++i) {
        long double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp((long double)z[i * k + j]);
        for (std::size_t j = 0; j < k; ++j)
          ref -= (long double)y[i * k + j] * ((long double)z[i * k + j] - std::log(s));
      }
      ref /= n;
      CHECK(std::abs(ops::softmax_cross_entropy(z, y).item() - double(ref)) < 1e-10);
    }
  }
  SUBCASE("row sums are validated") {
    TensorD z(Shape{2, 2}, 0.0), y(Shape{2, 2}, std::vector<double>{1, 0, 0.5, 0.4});
    CHECK_THROWS_AS(ops::softmax_cross_entropy(z, y), ValidationError);
  }
  SUBCASE("softmax rows sum to one and one-hot loss is non-negative") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      auto z = random_tensor(rng, {3, 5}, -30.0, 30.0);
      auto p = ops::softmax_rows<double>(z.data(), 5);
      for (std::size_t i = 0; i < 3; ++i) {
        double s = std::accumulate(p.begin() + i * 5, p.begin() + (i + 1) * 5, 0.0);
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
      TensorD y(Shape{3, 5}, 0.0);
      for (std::size_t i = 0; i < 3; ++i) y[i * 5 + rng.below(5)] = 1.0;
      CHECK(ops::softmax_cross_entropy(z, y).item() >= 0.0);
    }
  }
}

TEST_CASE("backward basics") {
  TensorD w(Shape{4}, std::vector<double>{0.5, -1, 2, 3});
  w.set_requires_grad(true);
  TensorD x(Shape{4}, std::vector<double>{1, 2, 3, 4});
  auto loss = ops::sum(ops::mul(w, x));
  backward(loss);
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == values(x));
  CHECK_FALSE(x.has_grad());

  SUBCASE("a second call accumulates exactly twice the gradient") {
    Rng rng(8);
    auto a = random_tensor(rng, {2, 3, 4, 4});
    a.set_requires_grad(true);
    auto k = random_tensor(rng, {2, 3, 3, 3});
    k.set_requires_grad(true);
    auto l = ops::sum(ops::activation(ops::conv2d(a, k, std::nullopt, {1, 1, 1}), ActivationKind::silu));
    backward(l);
    const std::vector<double> once(k.grad().begin(), k.grad().end());
    backward(l);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(k.grad()[i] == 2.0 * once[i]);
  }
  SUBCASE("non-scalar loss is rejected") {
    CHECK_THROWS_AS(backward(ops::mul(w, x)), ContractError);
  }
  SUBCASE("no graph is recorded under NoGradGuard") {
    NoGradGuard guard;
    auto y = ops::mul(w, x);
    CHECK(y.node()->is_leaf());
  }
}

TEST_CASE("forward ops are deterministic") {
  Rng a(99), b(99);
  auto x1 = random_tensor(a, {2, 4, 7, 7});
  auto x2 = random_tensor(b, {2, 4, 7, 7});
  auto w = random_tensor(a, {4, 1, 3, 3});
  (void)random_tensor(b, {4, 1, 3, 3});
  auto y1 = ops::conv2d(x1, w, std::nullopt, {2, 1, 4});
  auto y2 = ops::conv2d(x2, w, std::nullopt, {2, 1, 4});
  CHECK(values(y1) == values(y2));
}

TEST_CASE("float tensors agree with the 64-bit path") {
  Rng rng(13);
  auto x = random_tensor(rng, {1, 3, 6, 6});
  auto w = random_tensor(rng, {5, 3, 3, 3});
  auto yd = ops::conv2d(x, w, std::nullopt, {1, 1, 1});
  auto yf = ops::conv2d(cast<float>(x), cast<float>(w), std::nullopt, {1, 1, 1});
  for (std::size_t i = 0; i < yd.numel(); ++i) CHECK(yf[i] == doctest::Approx(yd[i]).epsilon(1e-5));
}

TEST_CASE("non-finite values are detected") {
  TensorD t(Shape{2}, std::vector<double>{1.0, NAN});
  CHECK_THROWS_AS(require_finite(t, "t"), NumericalError);
  TensorD z(Shape{1, 2}, std::vector<double>{INFINITY, 0.0}), y(Shape{1, 2}, std::vector<double>{0.0, 1.0});
  CHECK_THROWS_AS(ops::softmax_cross_entropy(z, y), NumericalError);
}
