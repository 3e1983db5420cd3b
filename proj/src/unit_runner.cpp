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

#include "rapq/unit_runner.hpp"

#include <algorithm>

#include "rapq/error.hpp"

namespace rapq {

namespace {

void accumulate(std::map<std::string, TensorF>& grads, const std::string& id, TensorF g) {
  auto it = grads.find(id);
  if (it == grads.end()) {
    grads.emplace(id, std::move(g));
  } else {
    it->second.array() += g.array();
  }
}

}  // namespace

const TensorF& UnitRunner::input_of(const std::string& member_input,
                                    const std::map<std::string, TensorF>& boundary,
                                    const UnitTape& tape) const {
  auto it = tape.out.find(member_input);
  if (it != tape.out.end()) return it->second;
  auto bit = boundary.find(member_input);
  if (bit == boundary.end())
    raise(ErrorCode::InvalidArgument, "unit forward: missing boundary tensor " + member_input);
  return bit->second;
}

TensorF UnitRunner::forward(const std::map<std::string, const TensorF*>& weights,
                            const std::map<std::string, const TensorF*>& biases,
                            const std::map<std::string, TensorF>& boundary, UnitTape& tape,
                            const Hook* hook, const std::set<std::string>* hooked_ids) const {
  for (const std::string& id : unit_.node_ids) {
    const GraphNode& n = graph_.node(id);
    const TensorF& x = input_of(n.inputs[0], boundary, tape);
    TensorF out;
    if (n.kind == "conv2d") {
      const TensorF& w = *weights.at(id);
      const ConvDims d = conv_dims(x.shape(), w.shape(), n.stride, n.pad);
      MatrixF cols = im2col(x, d);
      out = conv2d_from_cols(cols, w, *biases.at(id), d);
      tape.cols[id] = std::move(cols);
      tape.dims[id] = d;
    } else if (n.kind == "linear") {
      out = linear_forward(x, *weights.at(id), *biases.at(id));
    } else if (n.kind == "relu") {
      out = relu(x);
    } else if (n.kind == "add") {
      const TensorF& y = input_of(n.inputs[1], boundary, tape);
      require_same_shape(x, y, "unit add " + id);
      out = TensorF(x.shape(), x.array() + y.array());
    } else if (n.kind == "flatten") {
      out = x.reshaped({x.dim(0), x.numel() / x.dim(0)});
    } else {
      raise(ErrorCode::InvalidArgument, "unit forward: unsupported node kind " + n.kind);
    }
    if (hook && hooked_ids && hooked_ids->count(id)) {
      tape.pre[id] = out;
      TensorF mask;
      (*hook)(id, out, mask);
      tape.mask[id] = std::move(mask);
    }
    tape.out[id] = std::move(out);
  }
  return tape.out.at(unit_.output_id);
}

UnitRunner::Grads UnitRunner::backward(const TensorF& grad_out,
                                       const std::map<std::string, const TensorF*>& weights,
                                       const std::map<std::string, TensorF>& boundary,
                                       const UnitTape& tape, bool want_boundary) const {
  Grads result;
  std::map<std::string, TensorF> grads;
  grads.emplace(unit_.output_id, grad_out);

  for (auto rit = unit_.node_ids.rbegin(); rit != unit_.node_ids.rend(); ++rit) {
    const std::string& id = *rit;
    auto git = grads.find(id);
    if (git == grads.end()) continue;  // dead branch relative to the loss
    TensorF g = std::move(git->second);
    grads.erase(git);

    auto mit = tape.mask.find(id);
    if (mit != tape.mask.end()) {
      result.hooked_out[id] = g;
      g.array() *= mit->second.array();
    }

    const GraphNode& n = graph_.node(id);
    const bool in0_inside = tape.out.count(n.inputs[0]) > 0;
    const bool need_in0 = in0_inside || want_boundary;
    if (n.kind == "conv2d") {
      const ConvDims& d = tape.dims.at(id);
      result.weight[id] = conv2d_grad_weight_from_cols(tape.cols.at(id), g, d);
      if (need_in0) accumulate(grads, n.inputs[0], conv2d_grad_input(*weights.at(id), g, d));
    } else if (n.kind == "linear") {
      const TensorF& x = input_of(n.inputs[0], boundary, tape);
      LinearGrads lg = linear_grad(x, *weights.at(id), g);
      result.weight[id] = std::move(lg.weight);
      if (need_in0) accumulate(grads, n.inputs[0], std::move(lg.input));
    } else if (n.kind == "relu") {
      const TensorF& x = input_of(n.inputs[0], boundary, tape);
      if (need_in0) accumulate(grads, n.inputs[0], relu_grad(x, g));
    } else if (n.kind == "add") {
      const bool in1_inside = tape.out.count(n.inputs[1]) > 0;
      if (need_in0) accumulate(grads, n.inputs[0], g);
      if (in1_inside || want_boundary) accumulate(grads, n.inputs[1], g);
    } else if (n.kind == "flatten") {
      const TensorF& x = input_of(n.inputs[0], boundary, tape);
      if (need_in0) accumulate(grads, n.inputs[0], g.reshaped(x.shape()));
    }
  }

  if (want_boundary)
    for (auto& [id, g] : grads)
      if (boundary.count(id)) result.boundary[id] = std::move(g);
  return result;
}

TensorF gather_batch(const TensorF& pool, const std::vector<Index>& idx) {
  if (pool.ndim() < 1 || pool.dim(0) == 0)
    raise(ErrorCode::InvalidArgument, "gather_batch: empty pool");
  Shape shape = pool.shape();
  shape[0] = static_cast<Index>(idx.size());
  TensorF out(shape);
  const Index stride = pool.numel() / pool.dim(0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Index row = idx[i];
    if (row < 0 || row >= pool.dim(0))
      raise(ErrorCode::InvalidArgument, "gather_batch: index out of range");
    std::copy(pool.data() + row * stride, pool.data() + (row + 1) * stride,
              out.data() + static_cast<Index>(i) * stride);
  }
  return out;
}

}  // namespace rapq
