#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sscan/nn.hpp"

using namespace sscan;

TEST_CASE("linear forward matches a naive loop") {
  Rng rng(1);
  LinearLayer<double> lin;
  lin.init(4, 3, rng, true);
  lin.bias.value[1] = 0.5;
  const auto x = Tensor<double>::normal({6, 4}, rng);
  const auto y = lin.forward(x);
  CHECK(y.shape() == Shape{6, 3});
  for (index_t m = 0; m < 6; ++m)
    for (index_t o = 0; o < 3; ++o) {
      double acc = lin.bias.value[o];
      for (index_t i = 0; i < 4; ++i) acc += x(m, i) * lin.weight.value(o, i);
      CHECK(y(m, o) == doctest::Approx(acc).epsilon(1e-12));
    }
  CHECK_THROWS_AS(lin.forward(Tensor<double>({6, 5})), ShapeError);
}

TEST_CASE("fast_dot equals the serial dot product") {
  Rng rng(2);
  for (index_t n : {index_t(0), index_t(1), index_t(15), index_t(16), index_t(17),
                    index_t(100)}) {
    const auto a = Tensor<double>::normal({std::max<index_t>(n, 1)}, rng);
    const auto b = Tensor<double>::normal({std::max<index_t>(n, 1)}, rng);
    double ref = 0;
    for (index_t i = 0; i < n; ++i) ref += a[i] * b[i];
    CHECK(fast_dot(a.data(), b.data(), n) == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("conv1d is causal and matches a naive loop") {
  Rng rng(3);
  CausalConv1d<double> conv;
  conv.init(3, 4, rng);
  conv.bias.value[2] = -0.3;
  const auto x = Tensor<double>::normal({2, 7, 3}, rng);
  const auto y = conv.forward(x);
  for (index_t b = 0; b < 2; ++b)
    for (index_t t = 0; t < 7; ++t)
      for (index_t d = 0; d < 3; ++d) {
        double acc = conv.bias.value[d];
        for (index_t w = 0; w < 4; ++w) {
          const index_t s = t - 3 + w;
          if (s >= 0) acc += conv.weight.value(d, w) * x(b, s, d);
        }
        CHECK(y(b, t, d) == doctest::Approx(acc).epsilon(1e-12));
      }
  // Causality: perturbing x at time t must not change outputs before t.
  auto x2 = x;
  x2(0, 5, 1) += 10.0;
  const auto y2 = conv.forward(x2);
  for (index_t t = 0; t < 5; ++t)
    for (index_t d = 0; d < 3; ++d) CHECK(y2(0, t, d) == y(0, t, d));
  CHECK_THROWS_AS(conv.init(3, 0, rng), ShapeError);
}

TEST_CASE("rmsnorm matches the definition") {
  Rng rng(4);
  const auto x = Tensor<double>::normal({5, 6}, rng);
  auto gain = Tensor<double>::uniform({6}, rng, 0.5, 1.5);
  const auto y = rmsnorm(x, gain);
  for (index_t r = 0; r < 5; ++r) {
    double ms = 0;
    for (index_t d = 0; d < 6; ++d) ms += x(r, d) * x(r, d);
    const double inv = 1.0 / std::sqrt(ms / 6 + kRmsNormEps);
    for (index_t d = 0; d < 6; ++d)
      CHECK(y(r, d) == doctest::Approx(x(r, d) * inv * gain[d]).epsilon(1e-12));
  }
  // Scale covariance: rmsnorm(c*x) ~= rmsnorm(x) for large c (eps washes out).
  auto xs = x;
  for (index_t i = 0; i < xs.numel(); ++i) xs[i] *= 1000.0;
  const auto ys = rmsnorm(xs, gain);
  for (index_t i = 0; i < y.numel(); ++i)
    CHECK(ys[i] == doctest::Approx(y[i]).epsilon(1e-4));
}

TEST_CASE("cross entropy against hand-computed values") {
  // Uniform logits: loss = log(V) regardless of target.
  Tensor<double> logits({2, 4});
  std::vector<std::int32_t> targets = {1, 3};
  std::vector<std::uint8_t> mask = {1, 1};
  auto res = cross_entropy(logits, targets, mask);
  CHECK(res.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(res.count == 2);
  // dlogits = (softmax - onehot)/count.
  for (index_t r = 0; r < 2; ++r)
    for (index_t v = 0; v < 4; ++v) {
      const double expect = (0.25 - (v == targets[static_cast<size_t>(r)] ? 1.0 : 0.0)) / 2.0;
      CHECK(res.dlogits(r, v) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy masking, ties, and errors") {
  Tensor<double> logits({3, 3});
  logits(0, 0) = 5;   // correct: target 0
  logits(1, 1) = 5;   // masked out
  logits(2, 0) = 2;   // tie between 0 and 2 -> argmax is the lowest id
  logits(2, 2) = 2;
  std::vector<std::int32_t> targets = {0, 1, 2};
  std::vector<std::uint8_t> mask = {1, 0, 1};
  auto res = cross_entropy(logits, targets, mask);
  CHECK(res.count == 2);
  CHECK(res.correct == 1);  // row 0 hit; row 2's tie resolves to 0, a miss
  for (index_t v = 0; v < 3; ++v) CHECK(res.dlogits(1, v) == 0.0);
  targets[2] = 7;
  CHECK_THROWS_AS(cross_entropy(logits, targets, mask), DataError);
  CHECK_THROWS_AS(cross_entropy(logits, {0, 1}, {1, 1}), ShapeError);
  // All-masked batch: zero loss, zero gradient.
  auto none = cross_entropy(logits, {0, 1, 2}, {0, 0, 0});
  CHECK(none.loss == 0.0);
  CHECK(none.count == 0);
}

TEST_CASE("lr schedule: warmup, cosine decay, floor, constant") {
  AdamWHyper h;
  h.lr_peak = 1e-3;
  h.lr_floor = 1e-5;
  h.warmup_frac = 0.1;
  h.total_steps = 1000;
  h.schedule = LrSchedule::WarmupCosine;
  CHECK(lr_at_step(h, 0) == doctest::Approx(1e-3 / 100));
  CHECK(lr_at_step(h, 49) == doctest::Approx(1e-3 * 0.5));
  CHECK(lr_at_step(h, 99) == doctest::Approx(1e-3));
  CHECK(lr_at_step(h, 100) == doctest::Approx(1e-3).epsilon(1e-4));
  // Midpoint of the cosine leg.
  CHECK(lr_at_step(h, 100 + 450) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-2));
  CHECK(lr_at_step(h, 999) >= 1e-5);
  CHECK(lr_at_step(h, 999) <= 1.1e-5 + 1e-8);
  h.schedule = LrSchedule::Constant;
  CHECK(lr_at_step(h, 0) == 1e-3);
  CHECK(lr_at_step(h, 999) == 1e-3);
}

TEST_CASE("adamw first step matches the hand-derived update") {
  AdamWHyper h;
  h.lr_peak = 0.1;
  h.schedule = LrSchedule::Constant;
  h.weight_decay = 0.0;
  h.grad_clip = 0.0;  // disabled
  Param<double> p;
  p.init(Tensor<double>({2}, {1.0, -2.0}));
  p.grad[0] = 0.3;
  p.grad[1] = -0.7;
  AdamW<double> opt(h);
  opt.step({&p});
  // After bias correction the first update is g/(|g| + eps) = sign(g).
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * 0.3 / (0.3 + h.eps)).epsilon(1e-12));
  CHECK(p.value[1] == doctest::Approx(-2.0 + 0.1 * 0.7 / (0.7 + h.eps)).epsilon(1e-12));
}

TEST_CASE("adamw decoupled weight decay shrinks by (1 - lr*wd)") {
  AdamWHyper h;
  h.lr_peak = 1e-3;
  h.schedule = LrSchedule::Constant;
  h.weight_decay = 0.1;
  Param<double> p;
  p.init(Tensor<double>({1}, {4.0}));
  p.grad[0] = 0.0;  // decay only
  AdamW<double> opt(h);
  opt.step({&p});
  CHECK(p.value[0] == doctest::Approx(4.0 * (1.0 - 1e-3 * 0.1)).epsilon(1e-12));
}

TEST_CASE("adamw global-norm clipping") {
  AdamWHyper h;
  h.lr_peak = 1.0;
  h.schedule = LrSchedule::Constant;
  h.weight_decay = 0.0;
  h.grad_clip = 1.0;
  Param<double> p;
  p.init(Tensor<double>({2}, {0.0, 0.0}));
  p.grad[0] = 30.0;
  p.grad[1] = 40.0;  // norm 50 -> scaled by 1/50
  AdamW<double> opt(h);
  opt.step({&p});
  // Effective grads (0.6, 0.8): first-step update is sign-like but the
  // moments see the clipped values; verify via the m/v recurrences.
  const double g0 = 0.6, g1 = 0.8;
  const double upd0 = g0 / (std::sqrt(g0 * g0) + h.eps);
  const double upd1 = g1 / (std::sqrt(g1 * g1) + h.eps);
  CHECK(p.value[0] == doctest::Approx(-upd0).epsilon(1e-9));
  CHECK(p.value[1] == doctest::Approx(-upd1).epsilon(1e-9));
}

TEST_CASE("adamw converges on a quadratic") {
  AdamWHyper h;
  h.lr_peak = 0.05;
  h.schedule = LrSchedule::Constant;
  h.weight_decay = 0.0;
  Param<double> p;
  p.init(Tensor<double>({3}, {5.0, -3.0, 1.0}));
  AdamW<double> opt(h);
  for (int i = 0; i < 500; ++i) {
    for (index_t k = 0; k < 3; ++k) p.grad[k] = 2.0 * (p.value[k] - 1.0);
    opt.step({&p});
    p.zero_grad();
  }
  for (index_t k = 0; k < 3; ++k) CHECK(p.value[k] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("grad_check flags a wrong gradient") {
  Rng rng(5);
  Param<double> p;
  p.init(Tensor<double>::normal({4}, rng));
  auto loss = [&] {
    double s = 0;
    for (index_t i = 0; i < 4; ++i) s += p.value[i] * p.value[i];
    return s;
  };
  for (index_t i = 0; i < 4; ++i) p.grad[i] = 2.0 * p.value[i];
  auto good = grad_check<double>(loss, {{"p", &p}}, 1e-6, rng);
  CHECK(good.ok(1e-6));
  p.grad[2] += 1.0;  // corrupt one coordinate
  auto bad = grad_check<double>(loss, {{"p", &p}}, 1e-6, rng);
  CHECK(!bad.ok(1e-5));
}
