#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ztop {

// 64-bit FNV-1a over the base seed bytes followed by the label bytes.
// Used to derive one independent stream per purpose from a master seed.
inline std::uint64_t labeled_seed(std::uint64_t base, std::string_view label) {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  for (int i = 0; i < 8; ++i) mix(static_cast<std::uint8_t>(base >> (8 * i)));
  for (unsigned char c : label) mix(c);
  return h;
}

// Deterministic random stream. mt19937_64's output sequence is fully
// specified by the standard; the transforms below avoid the
// implementation-defined std::*_distribution classes so that identical
// seeds give identical streams everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  static Rng labeled(std::uint64_t base, std::string_view label) {
    return Rng(labeled_seed(base, label));
  }

  std::uint64_t bits() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive. Multiply-shift mapping.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span =
        static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) -
                                   static_cast<std::int64_t>(lo)) +
        1u;
    const auto x = static_cast<unsigned __int128>(gen_());
    return lo + static_cast<int>((x * span) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (no cached second value).
  double normal() {
    double u1 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925287;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace ztop
