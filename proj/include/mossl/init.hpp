#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "mossl/random.hpp"
#include "mossl/tensor.hpp"

namespace mossl {

/// Uniform in ±sqrt(1/fan_in). The stream is keyed by the parameter name, so
/// a tensor's initial value does not depend on which other parameters exist.
inline Tensor uniform_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed, std::string_view name) {
  Rng rng(derive_seed(seed, name));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  Tensor t(shape);
  for (double& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

}  // namespace mossl
