#pragma once

#include <cmath>
#include <cstdint>

namespace hfsc {

// Counter-based RNG. Every draw is a pure function of (seed, counter), so
// results are independent of call order, chunking and thread count, and a
// stream can be re-created anywhere from its key.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t keyed_u64(uint64_t seed, uint64_t index) {
  return mix64(mix64(seed) ^ mix64(index ^ 0xda942042e4dd58b5ULL));
}

// Uniform in (0, 1]; never returns 0 so log() is always safe.
inline double keyed_uniform(uint64_t seed, uint64_t index) {
  return (static_cast<double>(keyed_u64(seed, index) >> 11) + 1.0) * 0x1.0p-53;
}

// Standard normal via Box-Muller; consumes counters 2i and 2i+1.
inline double keyed_normal(uint64_t seed, uint64_t index) {
  const double u1 = keyed_uniform(seed, 2 * index);
  const double u2 = keyed_uniform(seed, 2 * index + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Sequential convenience wrapper over the keyed primitives.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64() { return keyed_u64(seed_, counter_++); }
  double uniform() { return keyed_uniform(seed_, counter_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return keyed_normal(seed_, counter_++); }
  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t counter_ = 0;
};

// Derives an independent stream key, e.g. per scene or per layer name.
inline uint64_t substream(uint64_t seed, uint64_t tag) {
  return keyed_u64(seed, tag);
}

inline uint64_t hash_name(const char* s) {
  // FNV-1a, used to key per-parameter init streams by layer name.
  uint64_t h = 0xcbf29ce484222325ULL;
  for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001b3ULL;
  return h;
}

}  // namespace hfsc
