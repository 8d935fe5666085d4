#include "sscan/instrument.hpp"

namespace sscan {

std::atomic<std::uint64_t>& FlopCounter::counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

namespace {
std::atomic<std::uint64_t> g_live{0};
std::atomic<std::uint64_t> g_peak{0};
}  // namespace

void TransientBytes::reset_peak() {
  g_peak.store(g_live.load());
}

std::uint64_t TransientBytes::peak() { return g_peak.load(); }

TransientBytes::Scope::Scope(std::uint64_t bytes) : bytes_(bytes) {
  const std::uint64_t live = g_live.fetch_add(bytes) + bytes;
  std::uint64_t peak = g_peak.load();
  while (live > peak && !g_peak.compare_exchange_weak(peak, live)) {
  }
}

TransientBytes::Scope::~Scope() { g_live.fetch_sub(bytes_); }

}  // namespace sscan
