#pragma once

// Portable, seeded randomness. The standard distributions are
// implementation-defined, so every draw used by training or data generation
// goes through the helpers below to keep model and dataset bytes identical
// across standard libraries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

namespace oseg {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a over a short tag, used to separate random streams by purpose.
constexpr std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Combines a base seed with any number of integer components.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

/// Uniform double in [0, 1) from a 64-bit hash value.
inline double unit_from_bits(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Standard normal deviate that depends only on `key` (Box-Muller).
inline double hashed_normal(std::uint64_t key) {
  const double u1 = 1.0 - unit_from_bits(splitmix64(key));
  const double u2 = unit_from_bits(splitmix64(key ^ 0xd1b54a32d192ed03ULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double uniform() { return unit_from_bits(engine_()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() { return hashed_normal(engine_()); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Draws k distinct indices out of [0, n) uniformly (partial Fisher-Yates).
/// The result is sorted ascending; k is clamped to n.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= n) return idx;
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace oseg
