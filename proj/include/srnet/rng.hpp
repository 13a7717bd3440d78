#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>

namespace srnet {

using Rng = std::mt19937_64;

/// Derives an independent component seed from a global seed and a label,
/// e.g. derive_seed(7, "finetune/2"). FNV-1a over the label, mixed with
/// the global seed through splitmix64.
std::uint64_t derive_seed(std::uint64_t global, std::string_view label);

/// Deterministic uniform integer in [0, n) independent of the standard
/// library's distribution implementations.
std::size_t uniform_index(Rng& rng, std::size_t n);
/// Deterministic uniform float in [0, 1).
double uniform01(Rng& rng);
/// Standard normal via Box-Muller on uniform01.
double standard_normal(Rng& rng);

template <typename It>
void deterministic_shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace srnet
