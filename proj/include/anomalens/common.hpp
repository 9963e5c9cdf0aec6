#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace anomalens {

/// Violated precondition on an operation's inputs.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid user configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk container; the message names the offending field.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite value produced or consumed by a numeric routine.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A metric that is mathematically undefined for the given inputs.
struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

// splitmix64 finalizer; used for all seed derivation.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(mix64(seed) ^ (index * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL));
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  return derive_seed(seed, fnv1a(label));
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

using Rng = std::mt19937_64;

/// Uniform double in [0,1) with 53 random bits; independent of the
/// standard library's distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline double standard_normal(Rng& rng) {
  // Box-Muller; 1-u keeps the log argument in (0,1].
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<std::int64_t>(rng() % span);
}

using Shape3 = std::array<int, 3>;

inline std::size_t voxel_count(const Shape3& s) {
  return static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]) *
         static_cast<std::size_t>(s[2]);
}

/// Dense 3D grid in C order (depth slowest, width fastest).
template <class T>
struct Grid3 {
  Shape3 shape{0, 0, 0};
  std::vector<T> data;

  Grid3() = default;
  explicit Grid3(Shape3 s, T fill = T{}) : shape(s), data(voxel_count(s), fill) {}
  Grid3(Shape3 s, std::vector<T> values) : shape(s), data(std::move(values)) {
    require(data.size() == voxel_count(shape), "Grid3: value count does not match shape");
  }

  std::size_t size() const { return data.size(); }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(shape[1]) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(shape[2]) +
           static_cast<std::size_t>(x);
  }
  T& operator()(int z, int y, int x) { return data[index(z, y, x)]; }
  const T& operator()(int z, int y, int x) const { return data[index(z, y, x)]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < shape[0] && y < shape[1] && x < shape[2];
  }

  bool operator==(const Grid3&) const = default;
};

using Volume = Grid3<float>;
using Mask = Grid3<std::uint8_t>;

}  // namespace anomalens
