#pragma once

#include "mambaclip/rng.hpp"
#include "mambaclip/tensor.hpp"

namespace mambaclip::detail {

inline Tensor<double> normal_tensor(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = stddev * rng.normal();
  return Tensor<double>(std::move(shape), std::move(v));
}

inline Tensor<double> uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace mambaclip::detail
