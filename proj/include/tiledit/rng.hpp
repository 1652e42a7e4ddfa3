#pragma once

#include <cstdint>

#include "tiledit/tensor.hpp"

namespace tiledit {

/// PCG32 (XSH-RR output over a 64-bit LCG state, O'Neill 2014).
///
/// Every sampler below is implemented on top of next_u32() with integer and
/// IEEE arithmetic only, so a seed produces the same stream on every platform.
/// std:: distributions are avoided because their algorithms are
/// implementation-defined.
class Rng {
public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0x5851f42d4c957f2dULL);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [lo, hi] inclusive, unbiased (rejection).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();

  Tensor normal_tensor(std::vector<std::size_t> shape, double stddev = 1.0);

  /// Independent child generator; does not advance this one's stream.
  Rng fork(std::uint64_t tag) const;

  std::uint64_t seed() const { return seed_; }

private:
  std::uint64_t seed_;
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer, used to derive well-mixed seeds.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace tiledit
