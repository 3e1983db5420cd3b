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

#ifndef RAPQ_EXECUTOR_HPP
#define RAPQ_EXECUTOR_HPP

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rapq/model_io.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

// Folds every BN node into the conv/linear producing its input and rewires
// the BN's consumers. The returned blob drops the BN statistics tensors.
Model fold_bn_model(const Model& model);

// Inference-mode forward over a ModelGraph. Weight overrides swap tensors by
// blob name, which is how partially quantized prefixes are evaluated.
class Executor {
 public:
  explicit Executor(const Model& model) : model_(model) {}

  void override_weight(const std::string& blob_name, TensorF tensor);
  void clear_overrides();

  // Applied in place to the batch itself (id "input") and to every node
  // output as it is produced; lets callers rewrite activations mid-graph.
  using NodeHook = std::function<void(const std::string& id, TensorF& value)>;
  void set_node_hook(NodeHook hook) { hook_ = std::move(hook); }

  TensorF run(const TensorF& input) const;  // output-node tensor

  // Also returns the outputs of the requested node ids ("input" allowed,
  // meaning the batch itself).
  std::map<std::string, TensorF> run_tapped(const TensorF& input,
                                            const std::vector<std::string>& tap_ids) const;

 private:
  TensorF fetch(const std::string& blob_name) const;

  const Model& model_;
  std::map<std::string, TensorF> overrides_;
  NodeHook hook_;
};

// Runs taps over a large batch in chunks and concatenates along dim 0.
std::map<std::string, TensorF> run_tapped_batched(const Executor& exec, const TensorF& images,
                                                  const std::vector<std::string>& tap_ids,
                                                  Index batch = 128);

std::vector<int> argmax_rows(const TensorF& logits);

// Fraction of samples whose argmax logit matches the label. Batched so large
// evaluation sets stay within memory.
double eval_accuracy(const Model& model, const TensorF& images,
                     const std::vector<int>& labels, Index batch = 128);

}  // namespace rapq

#endif  // RAPQ_EXECUTOR_HPP
