#pragma once

// Central-difference verification of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "corrfield/error.hpp"
#include "corrfield/tensor.hpp"

namespace corrfield {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares autodiff gradients of the scalar program `f` with respect to every
// entry of `params` against central differences with step h. The error for a
// coordinate is |ad - fd| / max(1, |fd|); the report keeps the maximum.
template <std::floating_point T, typename Program>
GradCheckReport check_gradients(Program&& f, std::vector<BasicTensor<T>> params,
                                double h) {
  if (!(h > 0.0)) throw std::invalid_argument("gradient check step must be > 0");
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  BasicTensor<T> loss = f();
  if (loss.size() != 1) {
    throw ShapeError("check_gradients needs a scalar program, got shape " +
                     to_string(loss.shape()));
  }
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericalError("non-finite program value at the base point");
  }
  const bool any_tracked = loss.requires_grad();
  if (any_tracked) loss.backward();

  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t];
    std::vector<T> analytic(p.size(), T(0));
    if (p.has_grad()) {
      std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    }
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T saved = vals[i];
      vals[i] = static_cast<T>(static_cast<double>(saved) + h);
      const double up = static_cast<double>(f().item());
      vals[i] = static_cast<T>(static_cast<double>(saved) - h);
      const double down = static_cast<double>(f().item());
      vals[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down) ||
          !std::isfinite(static_cast<double>(analytic[i]))) {
        throw NumericalError("non-finite value in gradient check at tensor " +
                             std::to_string(t) + ", coordinate " +
                             std::to_string(i));
      }
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(static_cast<double>(analytic[i]) - fd) /
                         std::max(1.0, std::abs(fd));
      ++report.coordinates;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_tensor = t;
        report.worst_index = i;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

// Single-input form: f maps x to a scalar.
template <std::floating_point T, typename Program>
  requires std::invocable<Program&, const BasicTensor<T>&>
double check_gradients(Program&& f, BasicTensor<T> x, double h) {
  return check_gradients<T>([&] { return f(x); }, std::vector<BasicTensor<T>>{x}, h)
      .max_relative_error;
}

}  // namespace corrfield
