#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sscan/scan.hpp"
#include "sscan/ssm.hpp"

using namespace sscan;

namespace {

// Naive reference fold, scalar loops only.
template <typename T>
Tensor<T> scan_naive(const Tensor<T>& a, const Tensor<T>& b,
                     const Tensor<T>* h0 = nullptr) {
  const index_t B = a.dim(0), L = a.dim(1), D = a.dim(2), N = a.dim(3);
  Tensor<T> h(a.shape());
  for (index_t bt = 0; bt < B; ++bt)
    for (index_t d = 0; d < D; ++d)
      for (index_t n = 0; n < N; ++n) {
        T s = h0 ? (*h0)(bt, d, n) : T(0);
        for (index_t l = 0; l < L; ++l) {
          s = a(bt, l, d, n) * s + b(bt, l, d, n);
          h(bt, l, d, n) = s;
        }
      }
  return h;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (index_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Random but scan-realistic pairs: a in (0,1) like exp(delta*A), b moderate.
struct PairCase {
  Tensor<double> a, b;
};

PairCase make_pairs(index_t B, index_t L, index_t D, index_t N, std::uint64_t seed) {
  Rng rng(seed);
  PairCase c{Tensor<double>({B, L, D, N}), Tensor<double>({B, L, D, N})};
  for (index_t i = 0; i < c.a.numel(); ++i) {
    c.a[i] = std::exp(-rng.uniform(0.001, 2.0));
    c.b[i] = rng.normal();
  }
  return c;
}

}  // namespace

TEST_CASE("combine is associative and has an identity") {
  Rng rng(11);
  const auto id = scan_identity<double>();
  for (int i = 0; i < 500; ++i) {
    const ScanPair<double> p{rng.uniform(0.0, 1.0), rng.normal()};
    const ScanPair<double> q{rng.uniform(0.0, 1.0), rng.normal()};
    const ScanPair<double> r{rng.uniform(0.0, 1.0), rng.normal()};
    const auto lhs = combine(combine(p, q), r);
    const auto rhs = combine(p, combine(q, r));
    CHECK(lhs.a == doctest::Approx(rhs.a).epsilon(1e-12));
    CHECK(lhs.b == doctest::Approx(rhs.b).epsilon(1e-12));
    const auto pi = combine(id, p);
    const auto ip = combine(p, id);
    CHECK(pi.a == p.a);
    CHECK(pi.b == p.b);
    CHECK(ip.a == p.a);
    CHECK(ip.b == p.b);
  }
}

TEST_CASE("combine composes affine maps in the right order") {
  // (p then q)(h) must equal q applied to p(h).
  const ScanPair<double> p{2.0, 3.0}, q{5.0, 7.0};
  const double h = 1.5;
  const auto pq = combine(p, q);
  CHECK(pq.a * h + pq.b == doctest::Approx(q.a * (p.a * h + p.b) + q.b));
}

TEST_CASE("sequential scan equals the naive fold") {
  set_threads(3);
  for (auto [B, L, D, N] : {std::array<index_t, 4>{1, 1, 1, 1},
                            {2, 7, 3, 4},
                            {1, 257, 9, 2},
                            {3, 64, 17, 5}}) {
    const auto c = make_pairs(B, L, D, N, 100 + L);
    CHECK(max_diff(scan_sequential(c.a, c.b), scan_naive(c.a, c.b)) == 0.0);
  }
  set_threads(1);
}

TEST_CASE("sequential scan honors the initial state") {
  const auto c = make_pairs(2, 13, 4, 3, 42);
  Rng rng(43);
  const auto h0 = Tensor<double>::normal({2, 4, 3}, rng);
  CHECK(max_diff(scan_sequential(c.a, c.b, &h0), scan_naive(c.a, c.b, &h0)) == 0.0);
}

TEST_CASE("parallel scan matches sequential across lengths") {
  for (index_t L : {index_t(1), index_t(2), index_t(64), index_t(257),
                    index_t(4096), index_t(5000)}) {
    const auto c = make_pairs(2, L, 3, 4, 200 + L);
    const auto hs = scan_sequential(c.a, c.b);
    const auto hp = scan_parallel(c.a, c.b);
    CHECK(max_diff(hs, hp) <= 1e-10);
  }
}

TEST_CASE("parallel scan with initial state and odd channel counts") {
  const auto c = make_pairs(3, 129, 11, 3, 77);  // D not a multiple of the block
  Rng rng(78);
  const auto h0 = Tensor<double>::normal({3, 11, 3}, rng);
  CHECK(max_diff(scan_sequential(c.a, c.b, &h0), scan_parallel(c.a, c.b, &h0)) <= 1e-10);
}

TEST_CASE("parallel scan is thread-count invariant bit for bit") {
  const auto c = make_pairs(2, 1000, 5, 4, 55);
  set_threads(1);
  const auto h1 = scan_parallel(c.a, c.b);
  set_threads(6);
  const auto h6 = scan_parallel(c.a, c.b);
  set_threads(1);
  for (index_t i = 0; i < h1.numel(); ++i) CHECK(h1[i] == h6[i]);
}

TEST_CASE("scan rejects mismatched shapes") {
  Tensor<double> a({1, 2, 3, 4}), b({1, 2, 3, 5});
  CHECK_THROWS_AS(scan_sequential(a, b), ShapeError);
  CHECK_THROWS_AS(scan_parallel(a, b), ShapeError);
  Tensor<double> r3({2, 3, 4});
  CHECK_THROWS_AS(scan_sequential(r3, r3), ShapeError);
}

TEST_CASE("sequential scan FLOP count is exactly 3*B*L*D*N") {
  const auto c = make_pairs(2, 50, 6, 4, 91);
  FlopCounter::reset();
  (void)scan_sequential(c.a, c.b);
  CHECK(FlopCounter::get() == 3ull * 2 * 50 * 6 * 4);
}

// ---------------------------------------------------------------------------
// Fused chunked scan
// ---------------------------------------------------------------------------

namespace {

struct FusedCase {
  Tensor<double> x, delta, A, b_sel, c_sel;
  ScanInputs<double> inputs() const {
    ScanInputs<double> in;
    in.x = &x;
    in.delta = &delta;
    in.A = &A;
    in.B_sel = &b_sel;
    in.C_sel = &c_sel;
    return in;
  }
};

FusedCase make_fused(index_t B, index_t L, index_t D, index_t N, std::uint64_t seed) {
  Rng rng(seed);
  FusedCase c;
  c.x = Tensor<double>::normal({B, L, D}, rng);
  c.delta = Tensor<double>({B, L, D});
  for (index_t i = 0; i < c.delta.numel(); ++i) c.delta[i] = rng.uniform(0.001, 0.3);
  c.A = Tensor<double>({D, N});
  for (index_t i = 0; i < c.A.numel(); ++i) c.A[i] = -rng.uniform(0.2, 8.0);
  c.b_sel = Tensor<double>::normal({B, L, N}, rng);
  c.c_sel = Tensor<double>::normal({B, L, N}, rng);
  return c;
}

// Materializing oracle for the fused kernel.
Tensor<double> fused_oracle(const FusedCase& c) {
  const auto disc = discretize_zoh(c.delta, c.A, c.b_sel, true, c.x);
  const auto h = scan_sequential(disc.A_bar, disc.Bx_bar);
  return contract_states(h, c.c_sel, true);
}

}  // namespace

TEST_CASE("chunked-fused scan matches the materializing oracle") {
  for (auto [B, L, D, N] : {std::array<index_t, 4>{1, 1, 1, 1},
                            {2, 37, 5, 3},
                            {1, 300, 13, 4},
                            {2, 512, 8, 2}}) {
    const auto c = make_fused(B, L, D, N, 300 + L);
    const auto y = scan_chunked_fused(c.inputs(), 64);
    CHECK(max_diff(y, fused_oracle(c)) <= 1e-10);
  }
}

TEST_CASE("chunked-fused scan is invariant to chunk_len") {
  const index_t L = 300;
  const auto c = make_fused(2, L, 5, 4, 404);
  const auto ref = scan_chunked_fused(c.inputs(), L);
  for (index_t chunk : {index_t(1), index_t(16), index_t(64), index_t(256), L, L + 7}) {
    const auto y = scan_chunked_fused(c.inputs(), chunk);
    CHECK(max_diff(y, ref) <= 1e-10);
  }
  CHECK_THROWS_AS(scan_chunked_fused(c.inputs(), 0), ShapeError);
}

TEST_CASE("chunked-fused scan records chunk starts and the final state") {
  const auto c = make_fused(2, 100, 3, 4, 505);
  Tensor<double> starts, final_h;
  (void)scan_chunked_fused(c.inputs(), 30, &starts, &final_h);
  CHECK(starts.shape() == Shape{2, 4, 3, 4});  // ceil(100/30) = 4 chunks
  CHECK(final_h.shape() == Shape{2, 3, 4});
  // Chunk starts must equal the states the oracle reaches at those steps.
  const auto disc = discretize_zoh(c.delta, c.A, c.b_sel, true, c.x);
  const auto h = scan_sequential(disc.A_bar, disc.Bx_bar);
  for (index_t b = 0; b < 2; ++b) {
    for (index_t d = 0; d < 3; ++d)
      for (index_t n = 0; n < 4; ++n) {
        CHECK(starts(b, 0, d, n) == 0.0);
        for (index_t ci = 1; ci < 4; ++ci)
          CHECK(starts(b, ci, d, n) ==
                doctest::Approx(h(b, ci * 30 - 1, d, n)).epsilon(1e-12));
        CHECK(final_h(b, d, n) == doctest::Approx(h(b, 99, d, n)).epsilon(1e-12));
      }
  }
}

TEST_CASE("fused scan never materializes the state volume") {
  // Transient working set stays bounded by chunk-local buffers: doubling L
  // must not double the probe's peak.
  const index_t D = 16, N = 8;
  auto probe = [&](index_t L) {
    const auto c = make_fused(1, L, D, N, 600);
    TransientBytes::reset_peak();
    (void)scan_chunked_fused(c.inputs(), 256);
    return TransientBytes::peak();
  };
  const auto p1 = probe(2048);
  const auto p2 = probe(4096);
  CHECK(p2 <= p1 * 11 / 10 + 1024);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

TEST_CASE("dense scan backward matches finite differences") {
  const index_t B = 1, L = 9, D = 2, N = 3;
  auto c = make_pairs(B, L, D, N, 700);
  Rng rng(701);
  const auto dh_states = Tensor<double>::normal({B, L, D, N}, rng);
  const auto h0 = Tensor<double>::normal({B, D, N}, rng);
  const auto h = scan_sequential(c.a, c.b, &h0);
  const auto adj = backward_scan_dense(c.a, c.b, h, dh_states, &h0);
  auto loss = [&](const Tensor<double>& a, const Tensor<double>& b,
                  const Tensor<double>& h0v) {
    const auto hh = scan_sequential(a, b, &h0v);
    double s = 0;
    for (index_t i = 0; i < hh.numel(); ++i) s += hh[i] * dh_states[i];
    return s;
  };
  const double eps = 1e-6;
  for (index_t i = 0; i < c.a.numel(); i += 5) {
    auto ap = c.a, am = c.a;
    ap[i] += eps;
    am[i] -= eps;
    const double fd = (loss(ap, c.b, h0) - loss(am, c.b, h0)) / (2 * eps);
    CHECK(adj.da[i] == doctest::Approx(fd).epsilon(1e-5));
  }
  for (index_t i = 0; i < c.b.numel(); i += 5) {
    auto bp = c.b, bm = c.b;
    bp[i] += eps;
    bm[i] -= eps;
    const double fd = (loss(c.a, bp, h0) - loss(c.a, bm, h0)) / (2 * eps);
    CHECK(adj.db[i] == doctest::Approx(fd).epsilon(1e-5));
  }
  for (index_t i = 0; i < h0.numel(); ++i) {
    auto hp = h0, hm = h0;
    hp[i] += eps;
    hm[i] -= eps;
    const double fd = (loss(c.a, c.b, hp) - loss(c.a, c.b, hm)) / (2 * eps);
    CHECK(adj.dh0[i] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("chunked backward equals dense backward for every chunk_len") {
  const index_t B = 2, L = 123, D = 3, N = 4;
  const auto c = make_pairs(B, L, D, N, 800);
  Rng rng(801);
  const auto dh_states = Tensor<double>::normal({B, L, D, N}, rng);
  const auto h0 = Tensor<double>::normal({B, D, N}, rng);
  const auto h = scan_sequential(c.a, c.b, &h0);
  const auto ref = backward_scan_dense(c.a, c.b, h, dh_states, &h0);
  for (index_t chunk : {index_t(1), index_t(16), index_t(64), L, L + 9}) {
    const auto adj = backward_scan_chunked(c.a, c.b, dh_states, chunk, &h0);
    CHECK(max_diff(adj.da, ref.da) <= 1e-10);
    CHECK(max_diff(adj.db, ref.db) <= 1e-10);
    CHECK(max_diff(adj.dh0, ref.dh0) <= 1e-10);
  }
}
