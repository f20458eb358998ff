// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>

#include "strattn/tensor.hpp"

namespace testutil {

inline strattn::Tensor<double> random_tensor(strattn::Shape shape, strattn::Rng& rng,
                                             double lo = -1.0, double hi = 1.0) {
  strattn::Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.range(lo, hi);
  return t;
}

template <class S>
bool bit_identical(const strattn::Tensor<S>& a, const strattn::Tensor<S>& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(S)) == 0;
}

template <class S>
double dot(const strattn::Tensor<S>& a, const strattn::Tensor<S>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

}  // namespace testutil
