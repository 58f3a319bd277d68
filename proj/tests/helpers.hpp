#pragma once

#include <random>

#include "oracles.hpp"
#include "pan/tensor.hpp"

namespace testing {

inline oracle::Nd to_nd(const pan::Tensor& t) {
  oracle::Nd nd;
  nd.dims = t.shape();
  nd.v.assign(t.data().begin(), t.data().end());
  return nd;
}

inline pan::Tensor from_nd(const oracle::Nd& nd) { return pan::Tensor(nd.dims, nd.v); }

inline double max_abs_diff(const pan::Tensor& a, const oracle::Nd& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.v.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.v[i]));
  return m;
}

// Integer-valued tensors keep every sum exact in double precision.
inline pan::Tensor random_tensor(const pan::Shape& shape, std::mt19937_64& rng, bool integer) {
  pan::Tensor t(shape);
  std::uniform_real_distribution<double> real(-2.0, 2.0);
  std::uniform_int_distribution<int> whole(-4, 4);
  for (double& v : t.data()) v = integer ? whole(rng) : real(rng);
  return t;
}

inline std::int64_t pick(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

}  // namespace testing
