#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tomokit {

inline constexpr double kPi = std::numbers::pi;
inline constexpr const char* kVersion = "0.4.0";

/// Base error for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Divergence, non-finite values, singular systems.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Random numbers.
//
// Everything that needs reproducible randomness takes either an explicit
// std::mt19937_64 or a (seed, stream, index) triple hashed through splitmix64.
// The counter-based form keeps per-ray jitter independent of evaluation order.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (splitmix64(b) + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
}

/// Uniform in [0, 1) from the top 53 bits.
inline double to_unit_double(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

inline double hashed_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return to_unit_double(hash_combine(hash_combine(seed, stream), index));
}

/// Uniform in [0, 1). Portable across standard library implementations,
/// unlike std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) { return to_unit_double(rng()); }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline int uniform_index(std::mt19937_64& rng, int n) {
  return std::min(n - 1, static_cast<int>(uniform01(rng) * n));
}

/// Standard normal via Box-Muller.
inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

// ---------------------------------------------------------------------------
// Worker threads.

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{0};
  return cap;
}
}  // namespace detail

/// Number of worker threads used by parallel_for. Resolution order: explicit
/// set_worker_threads(), the TOMOKIT_THREADS environment variable, then the
/// machine's hardware concurrency.
inline int worker_threads() {
  const int cap = detail::thread_cap().load();
  if (cap > 0) return cap;
  if (const char* env = std::getenv("TOMOKIT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void set_worker_threads(int n) { detail::thread_cap().store(std::max(0, n)); }

/// Calls fn(i) for i in [0, n). Work is split into contiguous static blocks.
/// Callers must write results to disjoint slots; nothing here reduces.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t block = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * block;
    const std::size_t hi = std::min(n, lo + block);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace tomokit
