#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mflow {

// Platform-stable random source. std::mt19937_64 output is fixed by the
// standard; the distribution transforms below are ours so that results do
// not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  std::vector<double> normals(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent stream keys.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                         std::uint64_t c = 0);

// Counter-based standard-normal generator: element i of the stream keyed by
// `key` is a pure function of (key, i).
class CounterNoise {
 public:
  explicit CounterNoise(std::uint64_t key) : key_(key) {}
  double normal(std::uint64_t index) const;
  std::vector<double> normals(std::size_t n) const;

 private:
  std::uint64_t key_;
};

}  // namespace mflow
