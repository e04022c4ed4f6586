#include "distillab/optim.hpp"

#include <cmath>

namespace distillab {

StudentState StudentState::start(const Tensor& params) {
  return {params, Tensor::zeros(params.shape()), 0};
}

StudentState sgd_momentum_step(const StudentState& state, const Tensor& g, const Tensor& lr,
                               double momentum) {
  if (g.shape() != state.params.shape()) {
    throw TensorError("sgd_momentum_step: gradient " + to_string(g.shape()) + " vs params " +
                      to_string(state.params.shape()));
  }
  if (lr.numel() != 1 || !(lr.item() > 0.0)) {
    throw TensorError("sgd_momentum_step: learning rate must be a positive scalar");
  }
  for (double v : g.data()) {
    if (!std::isfinite(v)) throw TensorError("sgd_momentum_step: non-finite gradient");
  }
  Tensor velocity = add(scale(state.velocity, momentum), g);
  Tensor params = sub(state.params, mul(lr, velocity));
  return {std::move(params), std::move(velocity), state.step + 1};
}

StudentState sgd_momentum_step(const StudentState& state, const Tensor& g, double lr,
                               double momentum) {
  return sgd_momentum_step(state, g, Tensor::scalar(lr), momentum);
}

}  // namespace distillab
