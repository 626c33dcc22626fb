#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "vasa/tensor.hpp"

namespace vasa {

uint64_t splitmix64(uint64_t x);

// Stable 64-bit hash of a label, for deriving named substreams.
uint64_t hash_label(std::string_view s);

// Deterministic random stream. mt19937_64 is fully specified by the standard,
// and both the uniform and the normal transforms are written out by hand, so
// the exact sequence is identical on every platform and compiler.
class RngStream {
 public:
  explicit RngStream(uint64_t seed)
      : seed_(seed), eng_(splitmix64(seed ^ 0x9e3779b97f4a7c15ull)) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  int64_t uniform_int(int64_t n);

  // Standard normal via Box-Muller; second value of each pair is cached.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Tensor uniform_tensor(Shape s, double lo, double hi);
  Tensor normal_tensor(Shape s, double mean = 0.0, double stddev = 1.0);

  // Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

  std::vector<int64_t> permutation(int64_t n);

  // Independent substream addressed by (parent seed, label, index). Forking
  // never consumes state from the parent, so substream layouts are stable.
  RngStream fork(std::string_view label, uint64_t index = 0) const {
    uint64_t s = splitmix64(seed_ ^ hash_label(label));
    s = splitmix64(s ^ (index * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull));
    return RngStream(s);
  }

 private:
  uint64_t seed_ = 0;
  std::mt19937_64 eng_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace vasa
