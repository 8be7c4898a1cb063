#pragma once

// Counter-based random streams for trajectory-parallel Monte Carlo.
// Philox4x32-10 keyed by the run seed; the trajectory index lives in the
// upper counter words, so any trajectory's stream can be generated
// independently of scheduling order.

#include <array>
#include <cmath>
#include <cstdint>

namespace mnl {

namespace detail {

inline void philox_round(std::array<std::uint32_t, 4>& ctr,
                         const std::array<std::uint32_t, 2>& key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
  const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
  const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
  const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
  const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
  const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
  ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
}

}  // namespace detail

inline std::array<std::uint32_t, 4> philox4x32_10(
    std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    detail::philox_round(counter, key);
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return counter;
}

// One independent stream per (seed, stream index) pair. Each 128-bit block
// yields two uniform doubles; normals come from Box-Muller so draws are
// bit-reproducible across platforms and thread counts.
class NormalStream {
 public:
  NormalStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_lo_(static_cast<std::uint32_t>(stream)),
        stream_hi_(static_cast<std::uint32_t>(stream >> 32)) {}

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const auto block = next_block();
    const std::uint64_t a =
        (static_cast<std::uint64_t>(block[1]) << 32) | block[0];
    const std::uint64_t b =
        (static_cast<std::uint64_t>(block[3]) << 32) | block[2];
    // u1 in (0, 1] keeps the logarithm finite; u2 in [0, 1).
    const double u1 = ((a >> 11) + 1) * 0x1.0p-53;
    const double u2 = (b >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * kPi * u2;
    cached_ = r * std::sin(angle);
    has_cached_ = true;
    return r * std::cos(angle);
  }

  double uniform() {
    const auto block = next_block();
    const std::uint64_t a =
        (static_cast<std::uint64_t>(block[1]) << 32) | block[0];
    return (a >> 11) * 0x1.0p-53;
  }

 private:
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  std::array<std::uint32_t, 4> next_block() {
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(counter_),
        static_cast<std::uint32_t>(counter_ >> 32), stream_lo_, stream_hi_};
    ++counter_;
    return philox4x32_10(ctr, key_);
  }

  std::array<std::uint32_t, 2> key_;
  std::uint32_t stream_lo_;
  std::uint32_t stream_hi_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace mnl
