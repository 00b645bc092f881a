#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace ekinode {

/// SplitMix64 finalizer. Used to derive independent child seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded random source that reproduces the same stream on every platform.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard distributions are not (their algorithms are
/// implementation-defined), so conversion to reals and indices is done here.
/// Child streams are derived with SplitMix64 from (seed, stream id).
class Rng {
 public:
  static constexpr std::string_view kName = "mt19937_64+splitmix64";

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), engine_(splitmix64(seed ^ splitmix64(stream))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on the open interval (0, 1), 53 bits of resolution.
  double uniform01() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform on the open interval (lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n), unbiased (rejection on the top partial block).
  std::uint64_t index(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Independent stream derived from this generator's seed, not its position.
  Rng split(std::uint64_t stream) const {
    return Rng(seed_, splitmix64(stream_ + 0x632be59bd9b4e019ULL) ^ stream);
  }

  std::string identity() const {
    return std::string(kName) + " seed=" + std::to_string(seed_) +
           " stream=" + std::to_string(stream_);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

// Named streams so that e.g. the data split does not depend on how many
// draws the network initialization consumed.
namespace streams {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kExpand = 3;
}  // namespace streams

}  // namespace ekinode
