#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cfot {

using Engine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-streams of a run seed. Every consumer of randomness draws from
/// `stream(tag, index)`, so streams never share state and results depend only
/// on (seed, tag, index).
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t key(std::uint64_t tag, std::uint64_t index = 0) const {
    return splitmix64(splitmix64(seed_ ^ splitmix64(tag)) + index);
  }

  Engine stream(std::uint64_t tag, std::uint64_t index = 0) const {
    return Engine(key(tag, index));
  }

 private:
  std::uint64_t seed_;
};

/// Stream tags.
namespace tag {
inline constexpr std::uint64_t kData = 0x64617461;
inline constexpr std::uint64_t kInit = 0x696e6974;
inline constexpr std::uint64_t kBatch = 0x62617463;
inline constexpr std::uint64_t kTime = 0x74696d65;
inline constexpr std::uint64_t kEval = 0x6576616c;
inline constexpr std::uint64_t kProbe = 0x70726f62;
}  // namespace tag

inline double uniform01(Engine& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform(Engine& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double standard_normal(Engine& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

/// Exponential(1) by inverse CDF.
inline double exponential1(Engine& rng) { return -std::log1p(-uniform01(rng)); }

inline std::size_t uniform_index(Engine& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace cfot
