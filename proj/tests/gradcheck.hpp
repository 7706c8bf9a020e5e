#pragma once

// Central finite-difference oracle shared by the unit and acceptance tests.
// It only evaluates the forward function; it never touches backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pulseformer/autodiff.hpp"
#include "pulseformer/rng.hpp"

namespace pulseformer::testing {

using DNode = Node<double>;

inline Array<double> random_array(const Shape& shape, Rng& rng, double stddev = 1.0) {
  Array<double> a(shape);
  for (Index i = 0; i < a.size(); ++i) a[i] = rng.normal(0.0, stddev);
  return a;
}

/// Largest norm-relative error ||analytic - numeric|| / max(||analytic|| + ||numeric||, floor)
/// over all inputs.
inline double gradient_error(const std::function<DNode()>& loss_fn, std::vector<DNode> inputs,
                             double h = 1e-5) {
  for (auto& in : inputs) in.zero_grad();
  const DNode loss = loss_fn();
  backward(loss);
  double worst = 0.0;
  for (auto& in : inputs) {
    auto& value = in.mutable_value();
    Vector<double> numeric(value.size());
    for (Index i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      double plus, minus;
      {
        NoGradGuard guard;
        value[i] = saved + h;
        plus = loss_fn().item();
        value[i] = saved - h;
        minus = loss_fn().item();
      }
      value[i] = saved;
      numeric[i] = (plus - minus) / (2.0 * h);
    }
    const Vector<double>& analytic = in.grad().flat();
    const double denom = std::max(analytic.norm() + numeric.norm(), 1e-10);
    worst = std::max(worst, (analytic - numeric).norm() / denom);
  }
  return worst;
}

}  // namespace pulseformer::testing
