#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "sscan/instrument.hpp"
#include "sscan/ops.hpp"
#include "sscan/tensor.hpp"
#include "sscan/threads.hpp"

namespace sscan {

// Tuning constants. A chunk's (chunk_len * block * N) working set stays
// L2-resident at the default sizes; channel blocks of 8 give the
// embarrassingly parallel axis; Blelloch trees are built per 4096-element
// segment within very long sequences.
inline constexpr index_t kDefaultChunkLen = 256;
inline constexpr index_t kChannelBlock = 8;
inline constexpr index_t kBlellochSegment = 4096;

// Element of the affine scan monoid: h -> a*h + b.
template <typename T>
struct ScanPair {
  T a;
  T b;
};

template <typename T>
inline ScanPair<T> scan_identity() {
  return {T(1), T(0)};
}

// q after p: (p then q)(h) = q.a*(p.a*h + p.b) + q.b.
template <typename T>
inline ScanPair<T> combine(const ScanPair<T>& p, const ScanPair<T>& q) {
  return {q.a * p.a, q.a * p.b + q.b};
}

namespace detail {

inline void check_pairs_shape(const Shape& a, const Shape& b) {
  if (a.size() != 4 || a != b)
    throw ShapeError("scan: pair tensors must share a (B,L,D,N) shape, got " +
                     shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// Exact left fold of the recurrence h_l = a_l*h_{l-1} + b_l, emitting every
// state. a, b: (B,L,D,N); h0: (B,D,N) or null (zero state). 3 FLOPs per
// element, totalling 3*B*L*D*N.
template <typename T>
Tensor<T> scan_sequential(const Tensor<T>& a, const Tensor<T>& b,
                          const Tensor<T>* h0 = nullptr) {
  detail::check_pairs_shape(a.shape(), b.shape());
  const index_t B = a.dim(0), L = a.dim(1), DN = a.dim(2) * a.dim(3);
  Tensor<T> h(a.shape());
  const index_t nblocks = (DN + kChannelBlock * a.dim(3) - 1) / (kChannelBlock * a.dim(3));
  const index_t bw = kChannelBlock * a.dim(3);
  parallel_for(B * nblocks, [&](index_t lo, index_t hi) {
    for (index_t item = lo; item < hi; ++item) {
      const index_t batch = item / nblocks;
      const index_t c0 = (item % nblocks) * bw;
      const index_t c1 = std::min(DN, c0 + bw);
      const T* pa = a.data() + batch * L * DN;
      const T* pb = b.data() + batch * L * DN;
      T* ph = h.data() + batch * L * DN;
      const T* prev = h0 ? h0->data() + batch * DN : nullptr;
      for (index_t l = 0; l < L; ++l) {
        const index_t off = l * DN;
        if (l == 0 && !prev) {
          for (index_t c = c0; c < c1; ++c) ph[off + c] = pb[off + c];
        } else {
          const T* hp = (l == 0) ? prev : ph + off - DN;
          for (index_t c = c0; c < c1; ++c)
            ph[off + c] = pa[off + c] * hp[c] + pb[off + c];
        }
      }
    }
  });
  FlopCounter::add(static_cast<std::uint64_t>(a.numel()) * kFlopsScanStep);
  return h;
}

namespace detail {

inline index_t next_pow2(index_t n) {
  index_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Blelloch exclusive scan over one L-segment for a contiguous block of
// channel-state columns, elementwise across the block. pa/pb hold the pair
// sequence (seg_len rows of width bw) and are overwritten in place; on exit
// they hold the exclusive prefixes padded to a power of two.
template <typename T>
void blelloch_segment(T* pa, T* pb, index_t lp, index_t bw,
                      std::uint64_t* combines) {
  // Up-sweep.
  for (index_t s = 1; s < lp; s <<= 1) {
    for (index_t i = 2 * s - 1; i < lp; i += 2 * s) {
      T* la = pa + (i - s) * bw;
      T* lb = pb + (i - s) * bw;
      T* ra = pa + i * bw;
      T* rb = pb + i * bw;
      for (index_t c = 0; c < bw; ++c) {
        rb[c] = ra[c] * lb[c] + rb[c];
        ra[c] = ra[c] * la[c];
      }
      ++*combines;
    }
  }
  // Clear the root, then down-sweep. Left child receives the parent prefix;
  // right child receives parent-prefix-then-left-subtree.
  for (index_t c = 0; c < bw; ++c) {
    pa[(lp - 1) * bw + c] = T(1);
    pb[(lp - 1) * bw + c] = T(0);
  }
  for (index_t s = lp >> 1; s >= 1; s >>= 1) {
    for (index_t i = 2 * s - 1; i < lp; i += 2 * s) {
      T* la = pa + (i - s) * bw;
      T* lb = pb + (i - s) * bw;
      T* ra = pa + i * bw;
      T* rb = pb + i * bw;
      for (index_t c = 0; c < bw; ++c) {
        const T ta = la[c], tb = lb[c];
        la[c] = ra[c];
        lb[c] = rb[c];
        rb[c] = ta * rb[c] + tb;  // combine(parent, left)
        ra[c] = ta * ra[c];
      }
      ++*combines;
    }
  }
}

}  // namespace detail

// Work-efficient parallel (Blelloch) scan over the pair monoid. Produces the
// same inclusive states as scan_sequential. Non-power-of-two segment lengths
// are padded with the identity pair; the padded tail never reaches the
// output. Long sequences are processed in segments of kBlellochSegment with
// the carry folded sequentially between segments, so the combine order is
// fixed by the tree shape and independent of the thread count.
template <typename T>
Tensor<T> scan_parallel(const Tensor<T>& a, const Tensor<T>& b,
                        const Tensor<T>* h0 = nullptr) {
  detail::check_pairs_shape(a.shape(), b.shape());
  const index_t B = a.dim(0), L = a.dim(1), N = a.dim(3), DN = a.dim(2) * N;
  Tensor<T> h(a.shape());
  const index_t bw = std::min(DN, kChannelBlock * N);
  const index_t nblocks = (DN + bw - 1) / bw;

  parallel_for(B * nblocks, [&](index_t lo, index_t hi) {
    std::uint64_t combines = 0;
    const index_t seg_cap = std::min(L, kBlellochSegment);
    const index_t lp_cap = detail::next_pow2(seg_cap);
    std::vector<T> sa(static_cast<size_t>(lp_cap * bw));
    std::vector<T> sb(static_cast<size_t>(lp_cap * bw));
    std::vector<T> carry(static_cast<size_t>(bw));
    for (index_t item = lo; item < hi; ++item) {
      const index_t batch = item / nblocks;
      const index_t c0 = (item % nblocks) * bw;
      const index_t cw = std::min(DN, c0 + bw) - c0;
      const T* base_a = a.data() + batch * L * DN;
      const T* base_b = b.data() + batch * L * DN;
      T* base_h = h.data() + batch * L * DN;
      if (h0)
        std::memcpy(carry.data(), h0->data() + batch * DN + c0, sizeof(T) * cw);
      else
        std::fill(carry.begin(), carry.begin() + cw, T(0));

      for (index_t l0 = 0; l0 < L; l0 += kBlellochSegment) {
        const index_t len = std::min(kBlellochSegment, L - l0);
        const index_t lp = detail::next_pow2(len);
        for (index_t l = 0; l < len; ++l) {
          std::memcpy(sa.data() + l * cw, base_a + (l0 + l) * DN + c0, sizeof(T) * cw);
          std::memcpy(sb.data() + l * cw, base_b + (l0 + l) * DN + c0, sizeof(T) * cw);
        }
        for (index_t l = len; l < lp; ++l) {
          std::fill(sa.data() + l * cw, sa.data() + (l + 1) * cw, T(1));
          std::fill(sb.data() + l * cw, sb.data() + (l + 1) * cw, T(0));
        }
        detail::blelloch_segment(sa.data(), sb.data(), lp, cw, &combines);
        // Inclusive state: h_l = incl.a*carry + incl.b with
        // incl = combine(exclusive_l, pair_l).
        for (index_t l = 0; l < len; ++l) {
          const T* ea = sa.data() + l * cw;
          const T* eb = sb.data() + l * cw;
          const T* qa = base_a + (l0 + l) * DN + c0;
          const T* qb = base_b + (l0 + l) * DN + c0;
          T* out = base_h + (l0 + l) * DN + c0;
          for (index_t c = 0; c < cw; ++c) {
            const T ia = qa[c] * ea[c];
            const T ib = qa[c] * eb[c] + qb[c];
            out[c] = ia * carry[c] + ib;
          }
        }
        std::memcpy(carry.data(), base_h + (l0 + len - 1) * DN + c0, sizeof(T) * cw);
      }
    }
    FlopCounter::add(combines * static_cast<std::uint64_t>(bw) * kFlopsScanStep);
  });
  return h;
}

// ---------------------------------------------------------------------------
// Fused chunked scan
// ---------------------------------------------------------------------------

// Inputs of the fused selective-scan kernel: the continuous parameters and
// the raw input, from which (a_bar, b_bar*x) are produced chunk-locally.
// B and C are either per-position (selective, (B,L,N)) or static ((D,N)).
template <typename T>
struct ScanInputs {
  const Tensor<T>* x = nullptr;      // (B,L,D)
  const Tensor<T>* delta = nullptr;  // (B,L,D), positive
  const Tensor<T>* A = nullptr;      // (D,N), strictly negative
  const Tensor<T>* B_sel = nullptr;  // (B,L,N) when selective_B
  const Tensor<T>* B_static = nullptr;  // (D,N) otherwise
  const Tensor<T>* C_sel = nullptr;
  const Tensor<T>* C_static = nullptr;
};

// ZOH scalar pieces. phi(w) = expm1(w)/w with a 3-term series below the
// removable singularity at w = 0.
template <typename T>
inline T zoh_phi(T w) {
  if (std::abs(w) < T(1e-4)) return T(1) + w / T(2) + w * w / T(6);
  return std::expm1(w) / w;
}

// d/dw phi(w) = (e^w (w - 1) + 1) / w^2, with matching series fallback.
template <typename T>
inline T zoh_phi_grad(T w) {
  if (std::abs(w) < T(1e-4)) return T(0.5) + w / T(3) + w * w / T(8);
  return (std::exp(w) * (w - T(1)) + T(1)) / (w * w);
}

// State carried across chunk boundaries.
template <typename T>
struct ChunkState {
  Tensor<T> h_carry;  // (B, D, N)
  index_t chunk_len;
};

// Fused discretize + scan + C-contraction. Processes L in chunks of
// chunk_len; only the (B,D,N) carry persists between chunks and no
// (B,L,D,N) array is ever allocated. Optionally records the carry at the
// start of every chunk (for recomputation in the backward pass) and the
// final state.
template <typename T>
Tensor<T> scan_chunked_fused(const ScanInputs<T>& in, index_t chunk_len,
                             Tensor<T>* h_chunk_starts = nullptr,
                             Tensor<T>* h_final = nullptr) {
  const Tensor<T>& x = *in.x;
  const Tensor<T>& delta = *in.delta;
  const Tensor<T>& A = *in.A;
  if (chunk_len < 1) throw ShapeError("scan_chunked_fused: chunk_len must be >= 1");
  const index_t B = x.dim(0), L = x.dim(1), D = x.dim(2), N = A.dim(1);
  const index_t nchunks = (L + chunk_len - 1) / chunk_len;
  Tensor<T> y({B, L, D});
  if (L == 0) return y;
  if (h_chunk_starts) *h_chunk_starts = Tensor<T>({B, nchunks, D, N});
  if (h_final) *h_final = Tensor<T>({B, D, N});

  const index_t nblocks = (D + kChannelBlock - 1) / kChannelBlock;
  parallel_for(B * nblocks, [&](index_t lo, index_t hi) {
    const index_t bw = kChannelBlock;
    std::vector<T> abuf(static_cast<size_t>(chunk_len * bw * N));
    std::vector<T> hbuf(static_cast<size_t>(chunk_len * bw * N));
    std::vector<T> carry(static_cast<size_t>(bw * N));
    TransientBytes::Scope probe(sizeof(T) * (abuf.size() + hbuf.size() + carry.size()));
    for (index_t item = lo; item < hi; ++item) {
      const index_t batch = item / nblocks;
      const index_t d0 = (item % nblocks) * kChannelBlock;
      const index_t d1 = std::min(D, d0 + kChannelBlock);
      std::fill(carry.begin(), carry.end(), T(0));
      for (index_t c = 0; c < nchunks; ++c) {
        const index_t l0 = c * chunk_len;
        const index_t len = std::min(chunk_len, L - l0);
        if (h_chunk_starts)
          for (index_t d = d0; d < d1; ++d)
            std::memcpy(h_chunk_starts->data() + ((batch * nchunks + c) * D + d) * N,
                        carry.data() + (d - d0) * N, sizeof(T) * N);
        // Discretize the chunk into local buffers.
        for (index_t l = 0; l < len; ++l)
          for (index_t d = d0; d < d1; ++d) {
            const T dt = delta(batch, l0 + l, d);
            const T xv = x(batch, l0 + l, d);
            const T* arow = A.data() + d * N;
            const T* brow = in.B_sel ? in.B_sel->data() + (batch * L + l0 + l) * N
                                     : in.B_static->data() + d * N;
            T* pa = abuf.data() + (l * bw + d - d0) * N;
            T* pb = hbuf.data() + (l * bw + d - d0) * N;
            for (index_t n = 0; n < N; ++n) {
              const T w = dt * arow[n];
              pa[n] = std::exp(w);
              pb[n] = dt * brow[n] * zoh_phi(w) * xv;
            }
          }
        // Scan in place (hbuf rows become states).
        for (index_t l = 0; l < len; ++l) {
          const T* prev = (l == 0) ? carry.data() : hbuf.data() + (l - 1) * bw * N;
          T* cur = hbuf.data() + l * bw * N;
          const T* av = abuf.data() + l * bw * N;
          for (index_t cidx = 0; cidx < (d1 - d0) * N; ++cidx) {
            // carry/hbuf rows use bw*N layout; only the first (d1-d0)*N are live
            cur[cidx] = av[cidx] * prev[cidx] + cur[cidx];
          }
        }
        // Contract with C.
        for (index_t l = 0; l < len; ++l)
          for (index_t d = d0; d < d1; ++d) {
            const T* crow = in.C_sel ? in.C_sel->data() + (batch * L + l0 + l) * N
                                     : in.C_static->data() + d * N;
            const T* hrow = hbuf.data() + (l * bw + d - d0) * N;
            T acc = 0;
            for (index_t n = 0; n < N; ++n) acc += crow[n] * hrow[n];
            y(batch, l0 + l, d) = acc;
          }
        std::memcpy(carry.data(), hbuf.data() + (len - 1) * bw * N,
                    sizeof(T) * static_cast<size_t>(bw * N));
      }
      if (h_final)
        for (index_t d = d0; d < d1; ++d)
          std::memcpy(h_final->data() + (batch * D + d) * N,
                      carry.data() + (d - d0) * N, sizeof(T) * N);
    }
  });
  FlopCounter::add(static_cast<std::uint64_t>(B) * L * D * N *
                   (kFlopsDiscretize + kFlopsScanStep + kFlopsContract));
  return y;
}

// ---------------------------------------------------------------------------
// Scan backward
// ---------------------------------------------------------------------------

template <typename T>
struct ScanAdjoints {
  Tensor<T> da;   // (B,L,D,N)
  Tensor<T> db;   // (B,L,D,N)
  Tensor<T> dh0;  // (B,D,N)
};

// Reverse-time adjoint of the scan given the dense state tape h:
//   dh_l  += dh_states_l (upstream), then
//   da_l   = dh_l * h_{l-1},  db_l = dh_l,  dh_{l-1} += dh_l * a_l.
template <typename T>
ScanAdjoints<T> backward_scan_dense(const Tensor<T>& a, const Tensor<T>& b,
                                    const Tensor<T>& h,
                                    const Tensor<T>& dh_states,
                                    const Tensor<T>* h0 = nullptr) {
  detail::check_pairs_shape(a.shape(), b.shape());
  (void)b;
  const index_t B = a.dim(0), L = a.dim(1), DN = a.dim(2) * a.dim(3);
  ScanAdjoints<T> adj{Tensor<T>(a.shape()), Tensor<T>(a.shape()),
                      Tensor<T>({B, a.dim(2), a.dim(3)})};
  parallel_for(B, [&](index_t lo, index_t hi) {
    std::vector<T> dh(static_cast<size_t>(DN));
    for (index_t batch = lo; batch < hi; ++batch) {
      std::fill(dh.begin(), dh.end(), T(0));
      const T* pa = a.data() + batch * L * DN;
      const T* ph = h.data() + batch * L * DN;
      const T* pdh = dh_states.data() + batch * L * DN;
      T* pda = adj.da.data() + batch * L * DN;
      T* pdb = adj.db.data() + batch * L * DN;
      for (index_t l = L - 1; l >= 0; --l) {
        const index_t off = l * DN;
        const T* hprev = (l > 0) ? ph + off - DN
                                 : (h0 ? h0->data() + batch * DN : nullptr);
        for (index_t c = 0; c < DN; ++c) {
          const T g = dh[c] + pdh[off + c];
          pda[off + c] = g * (hprev ? hprev[c] : T(0));
          pdb[off + c] = g;
          dh[c] = g * pa[off + c];
        }
      }
      std::memcpy(adj.dh0.data() + batch * DN, dh.data(), sizeof(T) * DN);
    }
  });
  return adj;
}

// Same adjoints, but the state tape is never held for the full sequence:
// a forward sweep records h only at chunk starts, then chunks are replayed
// in reverse with the states regenerated chunk-locally.
template <typename T>
ScanAdjoints<T> backward_scan_chunked(const Tensor<T>& a, const Tensor<T>& b,
                                      const Tensor<T>& dh_states,
                                      index_t chunk_len,
                                      const Tensor<T>* h0 = nullptr) {
  detail::check_pairs_shape(a.shape(), b.shape());
  if (chunk_len < 1) throw ShapeError("backward_scan_chunked: chunk_len must be >= 1");
  const index_t B = a.dim(0), L = a.dim(1), DN = a.dim(2) * a.dim(3);
  const index_t nchunks = (L + chunk_len - 1) / chunk_len;
  ScanAdjoints<T> adj{Tensor<T>(a.shape()), Tensor<T>(a.shape()),
                      Tensor<T>({B, a.dim(2), a.dim(3)})};
  parallel_for(B, [&](index_t lo, index_t hi) {
    std::vector<T> boundaries(static_cast<size_t>(nchunks * DN));
    std::vector<T> htape(static_cast<size_t>((chunk_len + 1) * DN));
    std::vector<T> dh(static_cast<size_t>(DN));
    TransientBytes::Scope probe(sizeof(T) * (boundaries.size() + htape.size() + dh.size()));
    for (index_t batch = lo; batch < hi; ++batch) {
      const T* pa = a.data() + batch * L * DN;
      const T* pb = b.data() + batch * L * DN;
      // Forward sweep: record the entering state of every chunk.
      std::vector<T> carry(static_cast<size_t>(DN), T(0));
      if (h0) std::memcpy(carry.data(), h0->data() + batch * DN, sizeof(T) * DN);
      for (index_t c = 0; c < nchunks; ++c) {
        std::memcpy(boundaries.data() + c * DN, carry.data(), sizeof(T) * DN);
        const index_t l0 = c * chunk_len;
        const index_t len = std::min(chunk_len, L - l0);
        for (index_t l = 0; l < len; ++l)
          for (index_t k = 0; k < DN; ++k)
            carry[k] = pa[(l0 + l) * DN + k] * carry[k] + pb[(l0 + l) * DN + k];
      }
      // Reverse sweep over chunks.
      std::fill(dh.begin(), dh.end(), T(0));
      const T* pdh = dh_states.data() + batch * L * DN;
      T* pda = adj.da.data() + batch * L * DN;
      T* pdb = adj.db.data() + batch * L * DN;
      for (index_t c = nchunks - 1; c >= 0; --c) {
        const index_t l0 = c * chunk_len;
        const index_t len = std::min(chunk_len, L - l0);
        // Regenerate states within the chunk (htape row 0 = entering state).
        std::memcpy(htape.data(), boundaries.data() + c * DN, sizeof(T) * DN);
        for (index_t l = 0; l < len; ++l)
          for (index_t k = 0; k < DN; ++k)
            htape[(l + 1) * DN + k] =
                pa[(l0 + l) * DN + k] * htape[l * DN + k] + pb[(l0 + l) * DN + k];
        for (index_t l = len - 1; l >= 0; --l) {
          const index_t off = (l0 + l) * DN;
          for (index_t k = 0; k < DN; ++k) {
            const T g = dh[k] + pdh[off + k];
            pda[off + k] = g * htape[l * DN + k];
            pdb[off + k] = g;
            dh[k] = g * pa[off + k];
          }
        }
      }
      std::memcpy(adj.dh0.data() + batch * DN, dh.data(), sizeof(T) * DN);
    }
  });
  return adj;
}

}  // namespace sscan
