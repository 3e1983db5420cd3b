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

#include "rapq/executor.hpp"

#include <algorithm>
#include <set>

#include "rapq/error.hpp"
#include "rapq/nn.hpp"

namespace rapq {

Model fold_bn_model(const Model& model) {
  Model folded;
  folded.graph.input_shape = model.graph.input_shape;
  folded.graph.output = model.graph.output;

  // bn id -> producer id, applied as a rename of inputs downstream.
  std::map<std::string, std::string> alias;
  std::map<std::string, const GraphNode*> bn_after;  // producer id -> bn node
  std::set<std::string> dropped_tensors;

  for (const GraphNode& n : model.graph.nodes) {
    if (n.kind != "bn") continue;
    alias[n.id] = n.inputs[0];
    bn_after[n.inputs[0]] = &n;
    for (const std::string& t : {n.gamma, n.beta, n.mean, n.var}) dropped_tensors.insert(t);
  }
  auto resolve = [&alias](std::string id) {
    while (alias.count(id)) id = alias[id];
    return id;
  };

  std::map<std::string, std::pair<TensorF, TensorF>> folded_params;
  for (const GraphNode& n : model.graph.nodes) {
    if (n.kind == "bn") continue;
    GraphNode copy = n;
    for (std::string& in : copy.inputs) in = resolve(in);
    if ((n.kind == "conv2d" || n.kind == "linear") && bn_after.count(n.id)) {
      const GraphNode* bn = bn_after[n.id];
      BNParams params;
      params.gamma = model.weights.f32(bn->gamma).array();
      params.beta = model.weights.f32(bn->beta).array();
      params.running_mean = model.weights.f32(bn->mean).array();
      params.running_var = model.weights.f32(bn->var).array();
      params.epsilon = bn->epsilon;
      TensorF w = model.weights.f32(n.weight);
      TensorF b = model.weights.f32(n.bias);
      fold_bn(w, b, params);
      folded_params[n.weight] = {std::move(w), std::move(b)};
    }
    folded.graph.nodes.push_back(std::move(copy));
  }
  folded.graph.output = resolve(folded.graph.output);

  for (const auto& [name, tensor] : model.weights.entries()) {
    if (dropped_tensors.count(name)) continue;
    if (tensor.dtype == DType::F32) {
      auto it = folded_params.find(name);
      if (it != folded_params.end()) {
        folded.weights.put_f32(name, it->second.first);
        continue;
      }
      // Bias of a folded layer: find the conv whose weight was folded and
      // whose bias slot is this tensor.
      bool replaced = false;
      for (const GraphNode& n : model.graph.nodes) {
        if ((n.kind == "conv2d" || n.kind == "linear") && n.bias == name &&
            folded_params.count(n.weight)) {
          folded.weights.put_f32(name, folded_params[n.weight].second);
          replaced = true;
          break;
        }
      }
      if (!replaced) {
        TensorF copy(tensor.shape);
        std::copy(tensor.f32.begin(), tensor.f32.end(), copy.data());
        folded.weights.put_f32(name, std::move(copy));
      }
    } else {
      TensorI copy(tensor.shape);
      std::copy(tensor.i32.begin(), tensor.i32.end(), copy.data());
      folded.weights.put_i32(name, copy, tensor.dtype);
    }
  }
  folded.graph.validate(&folded.weights);
  return folded;
}

void Executor::override_weight(const std::string& blob_name, TensorF tensor) {
  overrides_[blob_name] = std::move(tensor);
}

void Executor::clear_overrides() { overrides_.clear(); }

TensorF Executor::fetch(const std::string& blob_name) const {
  auto it = overrides_.find(blob_name);
  if (it != overrides_.end()) return it->second;
  return model_.weights.f32(blob_name);
}

TensorF Executor::run(const TensorF& input) const {
  return run_tapped(input, {}).at(model_.graph.output);
}

std::map<std::string, TensorF> Executor::run_tapped(
    const TensorF& input, const std::vector<std::string>& tap_ids) const {
  if (input.ndim() != 4)
    raise(ErrorCode::ShapeMismatch, "executor input must be NCHW");
  const Shape sample{input.dim(1), input.dim(2), input.dim(3)};
  if (sample != model_.graph.input_shape)
    raise(ErrorCode::ShapeMismatch, "executor input " + shape_string(sample) +
                                        " does not match graph input " +
                                        shape_string(model_.graph.input_shape));

  std::map<std::string, TensorF> values;
  values["input"] = input;
  if (hook_) hook_("input", values["input"]);
  for (const GraphNode& n : model_.graph.nodes) {
    const TensorF& x = values.at(n.inputs[0]);
    if (n.kind == "conv2d") {
      values[n.id] = conv2d_forward(x, fetch(n.weight), fetch(n.bias), n.stride, n.pad);
    } else if (n.kind == "bn") {
      BNParams params;
      params.gamma = model_.weights.f32(n.gamma).array();
      params.beta = model_.weights.f32(n.beta).array();
      params.running_mean = model_.weights.f32(n.mean).array();
      params.running_var = model_.weights.f32(n.var).array();
      params.epsilon = n.epsilon;
      values[n.id] = bn_forward_infer(x, params);
    } else if (n.kind == "relu") {
      values[n.id] = relu(x);
    } else if (n.kind == "add") {
      const TensorF& y = values.at(n.inputs[1]);
      require_same_shape(x, y, "add node " + n.id);
      values[n.id] = TensorF(x.shape(), x.array() + y.array());
    } else if (n.kind == "linear") {
      values[n.id] = linear_forward(x, fetch(n.weight), fetch(n.bias));
    } else if (n.kind == "flatten") {
      values[n.id] = x.reshaped({x.dim(0), x.numel() / x.dim(0)});
    } else {
      raise(ErrorCode::InvalidArgument, "unknown node kind " + n.kind);
    }
    if (hook_) hook_(n.id, values[n.id]);
  }

  std::map<std::string, TensorF> out;
  out[model_.graph.output] = values.at(model_.graph.output);
  for (const std::string& id : tap_ids) {
    auto it = values.find(id);
    if (it == values.end())
      raise(ErrorCode::InvalidArgument, "tap references unknown node " + id);
    out[id] = it->second;
  }
  return out;
}

std::map<std::string, TensorF> run_tapped_batched(const Executor& exec, const TensorF& images,
                                                  const std::vector<std::string>& tap_ids,
                                                  Index batch) {
  if (images.ndim() != 4 || images.dim(0) == 0)
    raise(ErrorCode::ShapeMismatch, "run_tapped_batched expects a non-empty NCHW batch");
  const Index n = images.dim(0);
  const Index sample = images.numel() / n;
  std::map<std::string, TensorF> pooled;
  for (Index start = 0; start < n; start += batch) {
    const Index count = std::min(batch, n - start);
    TensorF chunk({count, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + start * sample, images.data() + (start + count) * sample,
              chunk.data());
    std::map<std::string, TensorF> taps = exec.run_tapped(chunk, tap_ids);
    for (const std::string& id : tap_ids) {
      const TensorF& part = taps.at(id);
      if (start == 0) {
        Shape full = part.shape();
        full[0] = n;
        pooled.emplace(id, TensorF(full));
      }
      TensorF& dst = pooled.at(id);
      const Index stride = part.numel() / count;
      std::copy(part.data(), part.data() + part.numel(), dst.data() + start * stride);
    }
  }
  return pooled;
}

std::vector<int> argmax_rows(const TensorF& logits) {
  const Index n = logits.dim(0), c = logits.dim(1);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const float* row = logits.data() + i * c;
    int best = 0;
    for (Index j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    labels[static_cast<std::size_t>(i)] = best;
  }
  return labels;
}

double eval_accuracy(const Model& model, const TensorF& images,
                     const std::vector<int>& labels, Index batch) {
  const Index n = images.dim(0);
  if (static_cast<Index>(labels.size()) != n)
    raise(ErrorCode::ShapeMismatch, "eval_accuracy: label count mismatch");
  Executor exec(model);
  Index correct = 0;
  const Index sample = images.numel() / n;
  for (Index start = 0; start < n; start += batch) {
    const Index count = std::min(batch, n - start);
    TensorF chunk({count, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + start * sample, images.data() + (start + count) * sample,
              chunk.data());
    const std::vector<int> pred = argmax_rows(exec.run(chunk));
    for (Index i = 0; i < count; ++i)
      if (pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(start + i)])
        ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace rapq
