#pragma once

#include "knetuq/common.hpp"

#include <cstdint>
#include <numbers>

namespace knetuq {

// SplitMix64 counter generator. Chosen over <random> engines because the
// standard distributions are implementation-defined; trajectory data must
// reproduce bit-identically from (seed, index) alone.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Substream for trajectory i: independent of how many substreams exist.
  static Rng substream(std::uint64_t seed, std::uint64_t index) {
    return Rng(seed ^ index);
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // Box-Muller; second deviate cached.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Vec next_gaussian_vector(int dim) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v(i) = next_gaussian();
    return v;
  }

  // Uniform integer in [0, bound). Fixed-point multiply keeps the draw
  // platform-independent.
  std::uint64_t next_below(std::uint64_t bound) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  // Fisher-Yates; std::shuffle is implementation-defined so not used here.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace knetuq
