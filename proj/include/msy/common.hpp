#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace msy {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy. The CLI maps these onto exit codes:
// UsageError -> 1, DataError/DimensionError -> 2, NumericError -> 3.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Deterministic PRNG. splitmix64 core with a fixed Box-Muller transform so
// that streams are bit-identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi).
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi <= lo) throw UsageError("uniform_int: empty range");
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo));
  }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // Derive an independent stream seed from a base seed and an index.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// Worker cap for data-parallel kernels. Resolution order: explicit
// set_max_threads(), then MSY_THREADS, then hardware concurrency.
int max_threads();
void set_max_threads(int n);  // 0 restores automatic detection

// Runs fn(begin, end) over a contiguous partition of [0, n). The partition
// depends only on n and the worker count, and every index is written by
// exactly one worker, so results are bitwise reproducible.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace msy
