#pragma once

#include <atomic>
#include <cstdint>

#include "sscan/common.hpp"

namespace sscan {

// Analytic FLOP accounting for the scan kernels. Counts are added in bulk
// (one add per kernel invocation), so the totals are deterministic and cheap.
//
// Conventions, per (b,l,d,n) element:
//   kFlopsScanStep    - one recurrence step: mul, mul, add
//   kFlopsDiscretize  - ZOH discretization: exp, two muls for w, phi eval
//                       (counted as 3), mul by delta, mul by B, mul by x
//   kFlopsContract    - output contraction with C: mul + add
inline constexpr std::uint64_t kFlopsScanStep = 3;
inline constexpr std::uint64_t kFlopsDiscretize = 8;
inline constexpr std::uint64_t kFlopsContract = 2;

class FlopCounter {
 public:
  static void add(std::uint64_t n) { counter().fetch_add(n, std::memory_order_relaxed); }
  static void reset() { counter().store(0); }
  static std::uint64_t get() { return counter().load(); }

 private:
  static std::atomic<std::uint64_t>& counter();
};

// Peak transient working-set tracker for chunk-local scan buffers. Scopes
// register their buffer size on entry and release it on exit; the recorded
// peak is the high-water mark across all live scopes.
class TransientBytes {
 public:
  static void reset_peak();
  static std::uint64_t peak();

  class Scope {
   public:
    explicit Scope(std::uint64_t bytes);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    std::uint64_t bytes_;
  };
};

}  // namespace sscan
