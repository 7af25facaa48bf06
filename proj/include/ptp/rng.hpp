#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace ptp {

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic child seed for an independent stream identified by `path`.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(base);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline void fill_normal(Rng& rng, std::span<double> out, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : out) v = dist(rng);
}

}  // namespace ptp
