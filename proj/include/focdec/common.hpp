#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace focdec {

// ---------------------------------------------------------------------------
// Errors. Each pipeline stage throws a dedicated type so the CLI can report
// the failing module and map it to an exit code.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PreprocessError : std::runtime_error {
  explicit PreprocessError(const std::string& msg) : std::runtime_error(msg) {}
};

struct AtlasError : std::runtime_error {
  explicit AtlasError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EvalError : std::runtime_error {
  explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

using Vec3i = std::array<int64_t, 3>;
using Vec3d = std::array<double, 3>;

inline int64_t product(const Vec3i& v) { return v[0] * v[1] * v[2]; }

// ---------------------------------------------------------------------------
// Deterministic RNG. SplitMix64 core with keyed substreams, so every sample /
// epoch / module derives an independent stream from (seed, key) and results
// do not depend on evaluation order. Gaussian via Box-Muller on the uniform
// stream; no reliance on libstdc++ distribution internals.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed + kGamma)) {}

  /// Independent substream keyed by `stream`; forking commutes with draws.
  Rng fork(uint64_t stream) const {
    return Rng(mix(state_ ^ mix(stream + kGamma)));
  }

  uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  /// Standard normal (Box-Muller, pair-cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Worker pool cap. FOCDEC_THREADS limits the number of workers; every
// parallel loop in the library partitions disjoint output ranges so results
// are byte-identical for any worker count.
// ---------------------------------------------------------------------------

inline int max_threads() {
  static const int cached = [] {
    unsigned hw = std::thread::hardware_concurrency();
    int n = hw == 0 ? 1 : static_cast<int>(hw);
    if (const char* env = std::getenv("FOCDEC_THREADS")) {
      int cap = std::atoi(env);
      if (cap > 0 && cap < n) n = cap;
    }
    return n;
  }();
  return cached;
}

/// Runs fn(i) for i in [0, n). Work items must write disjoint outputs; the
/// partition into worker ranges never affects the result.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  int workers = max_threads();
  if (workers <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (static_cast<int64_t>(workers) > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    int64_t lo = n * w / workers;
    int64_t hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace focdec
