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

#ifndef RAPQ_ADAM_HPP
#define RAPQ_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <vector>

#include "rapq/error.hpp"

namespace rapq {

// Adaptive-moment descent for one trainable tensor. Moments are kept in
// double so update order is the only source of rounding.
struct AdamState {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
  std::vector<double> m, v;

  AdamState(std::size_t n, double learning_rate)
      : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}

  template <typename Grad>
  void step(float* params, const Grad* grads, std::size_t n) {
    if (n != m.size()) raise(ErrorCode::ShapeMismatch, "adam: parameter count changed");
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(grads[i]);
      if (!std::isfinite(g)) raise(ErrorCode::Divergence, "adam: non-finite gradient");
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      params[i] = static_cast<float>(params[i] - lr * mh / (std::sqrt(vh) + eps));
    }
  }
};

}  // namespace rapq

#endif  // RAPQ_ADAM_HPP
