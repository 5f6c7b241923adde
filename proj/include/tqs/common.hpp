#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tqs {

// Error taxonomy mapped to process exit codes by the CLI:
// ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Internal contract violations (wrong shapes etc.) are programming errors,
// not user errors; they throw std::logic_error.
#define TQS_REQUIRE(cond, msg)                                   \
  do {                                                           \
    if (!(cond)) throw std::logic_error(std::string("internal: ") + (msg)); \
  } while (0)

constexpr double kPi = 3.14159265358979323846;

// Worker cap: TQS_THREADS if set, else hardware concurrency (min 1).
inline int thread_budget() {
  static const int budget = [] {
    if (const char* env = std::getenv("TQS_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
  }();
  return budget;
}

// Runs fn(i) for i in [0, n). Results must not depend on scheduling; tasks
// write disjoint state. Serial when the budget or n is 1.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  int workers = thread_budget();
  if (workers <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int64_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failed.load() && error) std::rethrow_exception(error);
}

}  // namespace tqs
