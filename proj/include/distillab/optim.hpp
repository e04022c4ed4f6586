#pragma once

#include <cstddef>

#include "distillab/tensor.hpp"

namespace distillab {

/// Student parameters and momentum buffer during an SGD run.
struct StudentState {
  Tensor params;
  Tensor velocity;
  std::size_t step = 0;

  /// params as given, zero velocity.
  static StudentState start(const Tensor& params);
};

/// v <- momentum * v + g;  theta <- theta - lr * v.
///
/// Every operation is an ordinary graph op, so when `g` (or `lr`) is tracked
/// the new state stays differentiable with respect to whatever produced them.
StudentState sgd_momentum_step(const StudentState& state, const Tensor& g, const Tensor& lr,
                               double momentum);
StudentState sgd_momentum_step(const StudentState& state, const Tensor& g, double lr,
                               double momentum);

}  // namespace distillab
