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

#ifndef RAPQ_UNIT_RUNNER_HPP
#define RAPQ_UNIT_RUNNER_HPP

#include <functional>
#include <map>
#include <set>
#include <string>

#include "rapq/blocks.hpp"
#include "rapq/nn.hpp"

namespace rapq {

// Per-iteration forward state kept for the backward pass.
struct UnitTape {
  std::map<std::string, TensorF> out;   // node outputs (post-hook)
  std::map<std::string, TensorF> pre;   // pre-hook values at hooked nodes
  std::map<std::string, TensorF> mask;  // pass-through masks at hooked nodes
  std::map<std::string, MatrixF> cols;  // im2col matrices per conv node
  std::map<std::string, ConvDims> dims;
};

// Differentiable forward/backward over one unit's member nodes. Weights come
// from the caller per layer id, so the same runner serves soft-quantized,
// hardened, and plain FP evaluation.
class UnitRunner {
 public:
  UnitRunner(const ModelGraph& graph, const BlockUnit& unit)
      : graph_(graph), unit_(unit) {}

  // Rewrites a node output in place and fills an elementwise pass-through
  // mask used by the backward pass (straight-through at the rewrite).
  using Hook = std::function<void(const std::string& id, TensorF& value, TensorF& mask)>;

  TensorF forward(const std::map<std::string, const TensorF*>& weights,
                  const std::map<std::string, const TensorF*>& biases,
                  const std::map<std::string, TensorF>& boundary, UnitTape& tape,
                  const Hook* hook = nullptr,
                  const std::set<std::string>* hooked_ids = nullptr) const;

  struct Grads {
    std::map<std::string, TensorF> weight;      // per layer id
    std::map<std::string, TensorF> boundary;    // per boundary id (on request)
    std::map<std::string, TensorF> hooked_out;  // dL/d(hooked output), pre-mask
  };

  Grads backward(const TensorF& grad_out, const std::map<std::string, const TensorF*>& weights,
                 const std::map<std::string, TensorF>& boundary, const UnitTape& tape,
                 bool want_boundary = false) const;

  const BlockUnit& unit() const { return unit_; }

 private:
  const TensorF& input_of(const std::string& member_input,
                          const std::map<std::string, TensorF>& boundary,
                          const UnitTape& tape) const;

  const ModelGraph& graph_;
  const BlockUnit& unit_;
};

// Gathers rows along dim 0; used to slice calibration pools into batches.
TensorF gather_batch(const TensorF& pool, const std::vector<Index>& idx);

}  // namespace rapq

#endif  // RAPQ_UNIT_RUNNER_HPP
