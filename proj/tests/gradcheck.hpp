#pragma once

// Test-only finite-difference oracle. Deliberately independent of grad():
// it only evaluates the function on perturbed copies of the input values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "distillab/tensor.hpp"

namespace distillab::testing {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Central differences of f at `x` (values only; x need not be tracked).
inline std::vector<double> numeric_gradient(const ScalarFn& f, const Tensor& x, double h = 1e-6) {
  std::vector<double> base = x.to_vector();
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor::from(x.shape(), plus)).item();
    const double fm = f(Tensor::from(x.shape(), minus)).item();
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

/// ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline double scalar_relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Relative error between grad() and central differences for f at x.
inline double gradcheck(const ScalarFn& f, const Tensor& x, double h = 1e-6) {
  Tensor leaf = x.detach_leaf();
  const std::vector<double> analytic = grad(f(leaf), {leaf})[0].to_vector();
  return relative_error(analytic, numeric_gradient(f, x, h));
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace distillab::testing
