#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>

namespace trinet {

// Deterministic stream derivation and portable sampling.
//
// std::mt19937_64 output is fully specified by the standard; the std::
// distributions are not. All variate transforms here are hand-rolled so the
// same (seed, purpose) pair produces the same values on any conforming
// standard library.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// FNV-1a over a label, mixed with the seed and an index, then finalized.
// Used to give every consumer (init, gates, dropout, batch order, ...) an
// independent stream keyed by (seed, purpose, index).
inline std::uint64_t derive_stream(std::uint64_t seed, std::string_view purpose,
                                   std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  h ^= splitmix64(seed);
  h = splitmix64(h);
  h ^= splitmix64(index + 0x51ed270b9f112a9dull);
  return splitmix64(h);
}

class Rng {
 public:
  explicit Rng(std::uint64_t stream_seed) : eng_(stream_seed) {}
  Rng(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0)
      : eng_(derive_stream(seed, purpose, index)) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1); rejects exact zeros so logit(u) stays finite.
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; one value per call, the pair partner is cached.
  double normal(double mean = 0.0, double sd = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + sd * spare_;
    }
    double u1 = uniform_open();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return mean + sd * r * std::cos(a);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free modulo bias is negligible for n << 2^64, but stay exact.
    std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Fisher-Yates with the portable integer draw.
template <typename Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace trinet
