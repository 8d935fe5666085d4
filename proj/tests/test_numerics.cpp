#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <numeric>

#include "sscan/instrument.hpp"
#include "sscan/ops.hpp"
#include "sscan/scan.hpp"
#include "sscan/tensor.hpp"
#include "sscan/threads.hpp"

using namespace sscan;

TEST_CASE("splitmix64 matches the reference stream") {
  // First outputs for state 0, frozen from an independent implementation of
  // the published constants.
  std::uint64_t s = 0;
  CHECK(splitmix64(s) == 0xe220a8397b1dcdafULL);
  CHECK(splitmix64(s) == 0x6e789e6aa1b965f4ULL);
  CHECK(splitmix64(s) == 0x06c45d188009454fULL);
  CHECK(splitmix64(s) == 0xf88bb8a8724c81ecULL);
}

TEST_CASE("xoshiro256** stream is bit-exact for a fixed seed") {
  Rng rng(42);
  CHECK(rng.next_u64() == 0x15780b2e0c2ec716ULL);
  CHECK(rng.next_u64() == 0x6104d9866d113a7eULL);
  CHECK(rng.next_u64() == 0xae17533239e499a1ULL);
}

TEST_CASE("rng streams are reproducible and seed-sensitive") {
  Rng a(7), b(7), c(8);
  bool same = true, diff = false;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    same = same && (va == b.next_u64());
    diff = diff || (va != c.next_u64());
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("rng distributions") {
  Rng rng(123);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) CHECK(rng.uniform_int(17) < 17);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("tensor shape, strides, indexing, reshape") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.strides() == Shape{12, 4, 1});
  t(1, 2, 3) = 5.0;
  CHECK(t[23] == 5.0);
  Tensor<double> r = t.reshaped({6, 4});
  CHECK(r(5, 3) == 5.0);
  CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST_CASE("tensor factories") {
  Rng rng(1);
  const auto z = Tensor<float>::zeros({3, 3});
  for (index_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0.0f);
  const auto f = Tensor<float>::full({2, 2}, 3.5f);
  for (index_t i = 0; i < f.numel(); ++i) CHECK(f[i] == 3.5f);
  const auto u = Tensor<double>::uniform({100}, rng, -2.0, -1.0);
  for (index_t i = 0; i < u.numel(); ++i) {
    CHECK(u[i] >= -2.0);
    CHECK(u[i] < -1.0);
  }
  Tensor<double> nf({2});
  nf[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK(!nf.all_finite());
  CHECK(u.all_finite());
}

TEST_CASE("scalar kernels against naive formulas") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-6.0, 6.0);
    CHECK(sigmoid_scalar(x) == doctest::Approx(1.0 / (1.0 + std::exp(-x))).epsilon(1e-12));
    CHECK(softplus_scalar(x) == doctest::Approx(std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0)).epsilon(1e-12));
    CHECK(silu_scalar(x) == doctest::Approx(x / (1.0 + std::exp(-x))).epsilon(1e-12));
  }
  // Stability at extremes.
  CHECK(softplus_scalar(1000.0) == doctest::Approx(1000.0));
  CHECK(softplus_scalar(-1000.0) == 0.0);
  CHECK(std::isfinite(sigmoid_scalar(-1000.0)));
  // softplus^{-1} round trip on the dt-init range.
  for (int i = 0; i < 50; ++i) {
    const double y = rng.uniform(0.001, 0.1);
    CHECK(softplus_scalar(softplus_inverse_scalar(y)) == doctest::Approx(y).epsilon(1e-10));
  }
  // silu_grad matches central differences.
  for (int i = 0; i < 50; ++i) {
    const double x = rng.uniform(-4.0, 4.0), h = 1e-6;
    const double fd = (silu_scalar(x + h) - silu_scalar(x - h)) / (2 * h);
    CHECK(silu_grad_scalar(x) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("matmul matches a naive triple loop") {
  Rng rng(3);
  const auto a = Tensor<double>::normal({5, 7}, rng);
  const auto b = Tensor<double>::normal({7, 4}, rng);
  const auto c = matmul(a, b);
  for (index_t m = 0; m < 5; ++m)
    for (index_t p = 0; p < 4; ++p) {
      double acc = 0;
      for (index_t k = 0; k < 7; ++k) acc += a(m, k) * b(k, p);
      CHECK(c(m, p) == doctest::Approx(acc).epsilon(1e-12));
    }
  CHECK_THROWS_AS(matmul(a, Tensor<double>({5, 4})), ShapeError);
}

TEST_CASE("matmul broadcasts batch extents") {
  Rng rng(4);
  const auto a = Tensor<double>::normal({3, 2, 4}, rng);  // batch 3
  const auto b = Tensor<double>::normal({4, 5}, rng);     // shared
  const auto c = matmul(a, b);
  CHECK(c.shape() == Shape{3, 2, 5});
  for (index_t n = 0; n < 3; ++n)
    for (index_t m = 0; m < 2; ++m)
      for (index_t p = 0; p < 5; ++p) {
        double acc = 0;
        for (index_t k = 0; k < 4; ++k) acc += a(n, m, k) * b(k, p);
        CHECK(c(n, m, p) == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("transpose and reductions") {
  Rng rng(5);
  const auto x = Tensor<double>::normal({3, 4, 5}, rng);
  const auto t = transpose(x, {2, 0, 1});
  CHECK(t.shape() == Shape{5, 3, 4});
  for (index_t i = 0; i < 3; ++i)
    for (index_t j = 0; j < 4; ++j)
      for (index_t k = 0; k < 5; ++k) CHECK(t(k, i, j) == x(i, j, k));
  const auto tt = transpose2d(transpose2d(x.reshaped({12, 5})));
  for (index_t i = 0; i < x.numel(); ++i) CHECK(tt[i] == x[i]);

  const auto s = reduce_sum(x, 1);
  CHECK(s.shape() == Shape{3, 5});
  for (index_t i = 0; i < 3; ++i)
    for (index_t k = 0; k < 5; ++k) {
      double acc = 0;
      for (index_t j = 0; j < 4; ++j) acc += x(i, j, k);
      CHECK(s(i, k) == doctest::Approx(acc).epsilon(1e-12));
    }
  const auto mx = reduce_max(x, 0);
  for (index_t j = 0; j < 4; ++j)
    for (index_t k = 0; k < 5; ++k) {
      double m = x(0, j, k);
      for (index_t i = 1; i < 3; ++i) m = std::max(m, x(i, j, k));
      CHECK(mx(j, k) == m);
    }
  CHECK(sum_all(x) == doctest::Approx(std::accumulate(x.data(), x.data() + x.numel(), 0.0)));
}

TEST_CASE("softmax rows are normalized and shift-invariant") {
  Rng rng(6);
  auto x = Tensor<double>::normal({4, 9}, rng);
  const auto y = softmax(x);
  for (index_t r = 0; r < 4; ++r) {
    double z = 0;
    for (index_t i = 0; i < 9; ++i) {
      CHECK(y(r, i) > 0);
      z += y(r, i);
    }
    CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto shifted = x;
  for (index_t i = 0; i < shifted.numel(); ++i) shifted[i] += 1000.0;
  const auto y2 = softmax(shifted);
  for (index_t i = 0; i < y.numel(); ++i)
    CHECK(y2[i] == doctest::Approx(y[i]).epsilon(1e-9));
}

TEST_CASE("broadcast") {
  Tensor<double> v({3}, {1, 2, 3});
  const auto b = broadcast(v, {2, 3});
  for (index_t i = 0; i < 2; ++i)
    for (index_t j = 0; j < 3; ++j) CHECK(b(i, j) == v[j]);
  CHECK_THROWS_AS(broadcast(v, {3, 2}), ShapeError);
}

TEST_CASE("gather_rows and one_hot") {
  Tensor<double> table({3, 2}, {0, 1, 10, 11, 20, 21});
  const auto g = gather_rows(table, {2, 0, 2});
  CHECK(g(0, 0) == 20);
  CHECK(g(1, 1) == 1);
  CHECK(g(2, 1) == 21);
  CHECK_THROWS_AS(gather_rows(table, {3}), DataError);
  const auto oh = one_hot<double>({1, 0}, 3);
  CHECK(oh(0, 1) == 1.0);
  CHECK(oh(0, 0) == 0.0);
  CHECK(oh(1, 0) == 1.0);
  CHECK_THROWS_AS(one_hot<double>({5}, 3), DataError);
}

TEST_CASE("zoh phi and its derivative") {
  // Direct formula away from zero.
  for (double w : {-3.0, -0.5, -1e-3, 1e-3, 0.5, 3.0})
    CHECK(zoh_phi(w) == doctest::Approx(std::expm1(w) / w).epsilon(1e-12));
  // Series fallback is continuous across the switch and exact at 0.
  CHECK(zoh_phi(0.0) == 1.0);
  CHECK(zoh_phi(1e-4 - 1e-12) == doctest::Approx(zoh_phi(1e-4 + 1e-12)).epsilon(1e-12));
  CHECK(zoh_phi(-1e-4 + 1e-12) == doctest::Approx(zoh_phi(-1e-4 - 1e-12)).epsilon(1e-12));
  // Derivative vs central differences (h chosen to clear the series window).
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const double w = rng.uniform(-4.0, 4.0), h = 1e-5;
    const double fd = (zoh_phi(w + h) - zoh_phi(w - h)) / (2 * h);
    CHECK(zoh_phi_grad(w) == doctest::Approx(fd).epsilon(1e-7));
  }
  CHECK(zoh_phi_grad(0.0) == 0.5);
}

TEST_CASE("parallel_for covers the range exactly once") {
  for (int threads : {1, 2, 5}) {
    set_threads(threads);
    const index_t n = 1013;
    std::vector<std::atomic<int>> hits(n);
    for (auto& h : hits) h = 0;
    parallel_for(n, [&](index_t lo, index_t hi) {
      for (index_t i = lo; i < hi; ++i) hits[static_cast<size_t>(i)]++;
    });
    for (index_t i = 0; i < n; ++i) CHECK(hits[static_cast<size_t>(i)] == 1);
  }
  set_threads(1);
  parallel_for(0, [&](index_t, index_t) { CHECK(false); });
}

TEST_CASE("parallel_for results are thread-count invariant") {
  Rng rng(8);
  const auto x = Tensor<double>::normal({997}, rng);
  auto run = [&](int threads) {
    set_threads(threads);
    Tensor<double> y(x.shape());
    parallel_for(x.numel(), [&](index_t lo, index_t hi) {
      for (index_t i = lo; i < hi; ++i) y[i] = std::sin(x[i]) * 2.0;
    });
    return y;
  };
  const auto y1 = run(1), y4 = run(4);
  for (index_t i = 0; i < x.numel(); ++i) CHECK(y1[i] == y4[i]);
  set_threads(1);
}

TEST_CASE("flop counter and transient-bytes probe") {
  FlopCounter::reset();
  CHECK(FlopCounter::get() == 0);
  FlopCounter::add(10);
  FlopCounter::add(32);
  CHECK(FlopCounter::get() == 42);
  FlopCounter::reset();
  CHECK(FlopCounter::get() == 0);

  TransientBytes::reset_peak();
  {
    TransientBytes::Scope a(100);
    CHECK(TransientBytes::peak() >= 100);
    { TransientBytes::Scope b(50); }
    CHECK(TransientBytes::peak() == 150);
  }
  CHECK(TransientBytes::peak() == 150);  // peak persists after release
  TransientBytes::reset_peak();
  CHECK(TransientBytes::peak() == 0);
}
