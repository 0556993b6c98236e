#pragma once

#include <cstdint>

namespace iif {

// Counter-based RNG: every stream is keyed by a tuple of identifiers
// (seed, pixel, sample, bounce, ...), so results do not depend on how work
// is split across threads.
inline uint64_t mix64(uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return mix64(a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
}

class Rng {
 public:
  explicit Rng(uint64_t key) : key_(mix64(key ^ 0x853c49e6748fea9bULL)) {}
  Rng(uint64_t seed, uint64_t a) : Rng(hash_combine(mix64(seed), a)) {}
  Rng(uint64_t seed, uint64_t a, uint64_t b)
      : Rng(hash_combine(hash_combine(mix64(seed), a), b)) {}
  Rng(uint64_t seed, uint64_t a, uint64_t b, uint64_t c)
      : Rng(hash_combine(hash_combine(hash_combine(mix64(seed), a), b), c)) {}

  uint64_t next_u64() { return mix64(key_ + (++ctr_) * 0x9e3779b97f4a7c15ULL); }

  // Uniform in [0, 1).
  double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

 private:
  uint64_t key_;
  uint64_t ctr_ = 0;
};

}  // namespace iif
