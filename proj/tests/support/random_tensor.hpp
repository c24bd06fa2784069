#pragma once

#include "ppks/rng.hpp"
#include "ppks/tensor.hpp"

namespace ppks::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace ppks::testing
