#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mrcl {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// Order-sensitive combination of keys into a stream seed.
/// Used for every per-sample stream, e.g. derive_seed({seed, epoch, index, view}).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys);

inline Rng make_rng(std::initializer_list<std::uint64_t> keys) { return Rng(derive_seed(keys)); }

/// Uniform double in [0,1) built from the top 53 bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Stream tags, so that the augmentation, masking and shuffling draws never share a sequence.
enum class Stream : std::uint64_t {
  kAugment = 0xa11,
  kMask = 0xa12,
  kShuffle = 0xa13,
  kInit = 0xa14,
  kProbe = 0xa15,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace mrcl
