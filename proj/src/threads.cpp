#include "sscan/threads.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace sscan {

namespace {

int resolve_default_threads() {
  if (const char* env = std::getenv("SSCAN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

std::atomic<int> g_threads{0};  // 0 = not yet resolved

// Minimal persistent pool. Workers park on a condition variable between
// parallel_for calls; the pool is resized lazily when the thread count
// changes.
class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  void run(int workers, index_t n,
           const std::function<void(index_t, index_t)>& body) {
    ensure_workers(workers - 1);
    {
      std::unique_lock<std::mutex> lock(mu_);
      body_ = &body;
      total_ = n;
      nslices_ = workers;
      next_slice_ = 1;  // slice 0 runs on the calling thread
      pending_ = workers - 1;
      ++generation_;
    }
    cv_work_.notify_all();
    run_slice(0, n, workers, body);
    std::unique_lock<std::mutex> lock(mu_);
    cv_done_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
  }

 private:
  Pool() = default;

  ~Pool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      shutdown_ = true;
      ++generation_;
    }
    cv_work_.notify_all();
    for (auto& t : threads_) t.join();
  }

  static void run_slice(index_t slice, index_t n, index_t nslices,
                        const std::function<void(index_t, index_t)>& body) {
    const index_t chunk = (n + nslices - 1) / nslices;
    const index_t lo = slice * chunk;
    const index_t hi = std::min(n, lo + chunk);
    if (lo < hi) body(lo, hi);
  }

  void ensure_workers(int want) {
    std::unique_lock<std::mutex> lock(mu_);
    while (static_cast<int>(threads_.size()) < want)
      threads_.emplace_back([this] { worker_loop(); });
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(index_t, index_t)>* body = nullptr;
      index_t slice = -1, n = 0, nslices = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_work_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
        seen = generation_;
        if (shutdown_) return;
        if (body_ && next_slice_ < nslices_) {
          slice = next_slice_++;
          body = body_;
          n = total_;
          nslices = nslices_;
        }
      }
      if (body) {
        run_slice(slice, n, nslices, *body);
        std::unique_lock<std::mutex> lock(mu_);
        if (--pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  std::vector<std::thread> threads_;
  const std::function<void(index_t, index_t)>* body_ = nullptr;
  index_t total_ = 0, nslices_ = 0, next_slice_ = 0;
  int pending_ = 0;
  std::uint64_t generation_ = 0;
  bool shutdown_ = false;
};

}  // namespace

void set_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

int get_threads() {
  int n = g_threads.load();
  if (n == 0) {
    n = resolve_default_threads();
    g_threads.store(n);
  }
  return n;
}

void parallel_for(index_t n,
                  const std::function<void(index_t, index_t)>& body) {
  if (n <= 0) return;
  const int workers = std::min<index_t>(get_threads(), n);
  if (workers <= 1) {
    body(0, n);
    return;
  }
  Pool::instance().run(workers, n, body);
}

}  // namespace sscan
