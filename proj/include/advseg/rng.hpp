#pragma once

#include <cstdint>
#include <random>

namespace advseg {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; decorrelates nearby seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream `stream` derived from a run seed. Every random consumer
/// in a run owns one stream so that draws in one never shift another.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) { return Rng(mix64(mix64(seed) ^ mix64(stream + 1))); }

namespace streams {
inline constexpr std::uint64_t kSegmenterInit = 1;
inline constexpr std::uint64_t kDiscriminatorInit = 2;
inline constexpr std::uint64_t kSegBatches = 3;
inline constexpr std::uint64_t kAdvBatches = 4;
inline constexpr std::uint64_t kValidation = 5;
inline constexpr std::uint64_t kProbe = 6;
inline constexpr std::uint64_t kProbeInit = 7;
inline constexpr std::uint64_t kSynthSource = 100;
inline constexpr std::uint64_t kSynthTarget = 200;
}  // namespace streams

}  // namespace advseg
