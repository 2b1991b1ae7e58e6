#ifndef FAAN_CORE_RNG_HPP
#define FAAN_CORE_RNG_HPP

#include <cstdint>
#include <random>
#include <string_view>

namespace faan {

/// Seeded random stream.
///
/// Every consumer (initialization, dropout, episode sampling, ...) derives
/// its own stream from the master seed and a name, optionally indexed by the
/// training step, so consumers never perturb one another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return mix(mix(master ^ h) + mix(index + 0x9e3779b97f4a7c15ULL));
  }

  static Rng substream(std::uint64_t master, std::string_view name, std::uint64_t index = 0) {
    return Rng(derive_seed(master, name, index));
  }

  /// Uniform in [0, 1).
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace faan

#endif  // FAAN_CORE_RNG_HPP
