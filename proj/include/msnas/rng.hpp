#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace msnas {

// PCG32 (O'Neill). Hand-rolled so that every stream is bit-reproducible across
// platforms and trivially serializable; std:: distributions are
// implementation-defined and would break the bitwise-reproducibility contract.
class Pcg32 {
 public:
  Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}
  Pcg32(uint64_t seed, uint64_t seq = 0xda3e39cb94b95bdbULL) { reseed(seed, seq); }

  void reseed(uint64_t seed, uint64_t seq = 0xda3e39cb94b95bdbULL) {
    state_ = 0;
    inc_ = (seq << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // Uniform in [0, bound) without modulo bias.
  uint32_t next_below(uint32_t bound) {
    if (bound <= 1) return 0;
    uint32_t threshold = (0u - bound) % bound;
    for (;;) {
      uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_below(static_cast<uint32_t>(hi - lo + 1)));
  }

  // Uniform in [0, 1).
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (the spare is discarded to keep the
  // consumed-stream length independent of call parity).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586477 * u2);
  }

  uint64_t state() const { return state_; }
  uint64_t inc() const { return inc_; }
  void restore(uint64_t state, uint64_t inc) {
    state_ = state;
    inc_ = inc;
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
};

// FNV-1a, used for stream derivation and file checksums in manifests.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Every random stream in the project is derived from (master seed, purpose
// tag, index). Streams are therefore independent of each other and of the
// order in which other streams are consumed, which is what makes epoch-level
// checkpoint resume exact.
inline Pcg32 derive_stream(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
  uint64_t h = fnv1a64(purpose);
  h = fnv1a64(&index, sizeof(index), h);
  uint64_t s = fnv1a64(&seed, sizeof(seed), h);
  return Pcg32(s, h | 1u);
}

}  // namespace msnas
