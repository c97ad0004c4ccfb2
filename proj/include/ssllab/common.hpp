#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ssllab {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything thrown by the library derives from Error so
// callers (and the CLI) can map failures onto stable exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape/rank violations: bad dimensions, mismatched operands, oversized kernels.
struct ShapeError : Error {
  using Error::Error;
};

/// Bad values: wrong element counts, out-of-range labels, empty inputs.
struct ValueError : Error {
  using Error::Error;
};

/// Invalid model/run configuration (divisibility, unknown keys, bad enums).
struct ConfigError : Error {
  using Error::Error;
};

/// Autodiff lifecycle misuse: consumed graphs, missing gradients.
struct LifecycleError : Error {
  using Error::Error;
};

/// Degenerate numerical state: zero-norm rows (representation collapse),
/// batches too small to normalize.
struct DegenerateError : Error {
  using Error::Error;
};

/// On-disk format violations: bad magic, truncated payloads, corrupt records.
struct FormatError : Error {
  using Error::Error;
};

/// Checkpoint does not match the requested model configuration.
struct IncompatibilityError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* what) {
  for (int64_t d : s) {
    if (d <= 0)
      throw ShapeError(std::string(what) + ": invalid shape " + shape_str(s) +
                       " (all dimensions must be >= 1)");
  }
}

template <typename T>
const char* dtype_name() = delete;
template <>
inline const char* dtype_name<float>() {
  return "fp32";
}
template <>
inline const char* dtype_name<double>() {
  return "fp64";
}

// ---------------------------------------------------------------------------
// Threading. A single global worker count, set once by the entry point.
// parallel_for partitions [0,n) into contiguous blocks; every index is
// processed by exactly one worker, so results do not depend on the count
// as long as iterations write disjoint outputs.
// ---------------------------------------------------------------------------

inline int& thread_count() {
  static int n = 1;
  return n;
}

inline void set_thread_count(int n) { thread_count() = n < 1 ? 1 : n; }

template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  const int workers = thread_count();
  if (workers <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int64_t nw = std::min<int64_t>(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nw));
  const int64_t chunk = (n + nw - 1) / nw;
  for (int64_t w = 0; w < nw; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ssllab
