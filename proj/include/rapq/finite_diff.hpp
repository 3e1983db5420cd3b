/*
 * Copyright (c) 2026 RAPQ Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef RAPQ_FINITE_DIFF_HPP
#define RAPQ_FINITE_DIFF_HPP

#include <cmath>
#include <vector>

#include "rapq/error.hpp"

namespace rapq {

// Central-difference gradient of a scalar function. All arithmetic is double,
// even when the function under test runs in float, so the truncation error of
// the stencil dominates and analytic gradients can be checked to ~1e-3.
template <typename F>
std::vector<double> finite_diff_grad(F&& f, const std::vector<double>& x, double eps = 1e-4) {
  if (!(eps >= 1e-5 && eps <= 1e-2))
    raise(ErrorCode::InvalidArgument, "finite_diff_grad: eps must lie in [1e-5, 1e-2]");
  std::vector<double> grad(x.size());
  std::vector<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double hi = f(probe);
    probe[i] = x[i] - eps;
    const double lo = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(hi) || !std::isfinite(lo))
      raise(ErrorCode::NonFinite, "finite_diff_grad: function returned a non-finite value");
    grad[i] = (hi - lo) / (2.0 * eps);
  }
  return grad;
}

template <typename F>
double finite_diff_scalar(F&& f, double x, double eps = 1e-4) {
  auto wrap = [&f](const std::vector<double>& v) { return f(v[0]); };
  return finite_diff_grad(wrap, std::vector<double>{x}, eps)[0];
}

// |a - b| relative to the larger magnitude, floored at 1 so near-zero pairs
// are compared absolutely.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    raise(ErrorCode::ShapeMismatch, "max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i]));
  return worst;
}

}  // namespace rapq

#endif  // RAPQ_FINITE_DIFF_HPP
