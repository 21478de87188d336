// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "repiln/tensor.hpp"

namespace repiln {

using Rng = std::mt19937_64;

/// Uniform in [-bound, bound).
template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// Kaiming-uniform with a = sqrt(5), i.e. bound 1/sqrt(fan_in), the usual
/// default for conv and linear layers.
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

/// Derives an independent stream from a base seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace repiln
