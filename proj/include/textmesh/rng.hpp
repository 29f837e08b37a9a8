#pragma once

#include <cstdint>
#include <string_view>

namespace textmesh {

// Deterministic xoshiro256++ generator with hand-rolled distributions.
// std::* distributions are implementation-defined, so every draw here is
// pinned to a fixed algorithm: identical seeds give identical streams on
// every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull);

  std::uint64_t next_u64();

  // Uniform in [0, 1).
  double uniform();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller (both values used, cached).
  double normal();
  double normal(double mean, double stddev);

  // Derive an independent child generator. Children created with the same
  // (seed, tag) pair are identical; different tags decorrelate streams.
  Rng split(std::string_view tag) const;
  Rng split(std::uint64_t tag) const;

  std::uint64_t state_hash() const;

 private:
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// 64-bit mix used for seed derivation and stable string hashing.
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);
std::uint64_t hash_string(std::string_view s);

}  // namespace textmesh
