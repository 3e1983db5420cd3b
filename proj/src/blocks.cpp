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

#include "rapq/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "rapq/error.hpp"
#include "rapq/softquant.hpp"

namespace rapq {

std::vector<std::string> topo_order(const ModelGraph& graph) {
  std::map<std::string, Index> pending;
  for (const GraphNode& n : graph.nodes) {
    Index c = 0;
    for (const std::string& in : n.inputs)
      if (in != "input") ++c;
    pending[n.id] = c;
  }
  std::vector<std::string> ready;
  for (const GraphNode& n : graph.nodes)
    if (pending[n.id] == 0) ready.push_back(n.id);
  std::vector<std::string> order;
  for (std::size_t head = 0; head < ready.size(); ++head) {
    const std::string id = ready[head];
    order.push_back(id);
    for (const GraphNode& n : graph.nodes)
      for (const std::string& in : n.inputs)
        if (in == id && --pending[n.id] == 0) ready.push_back(n.id);
  }
  if (order.size() != graph.nodes.size())
    raise(ErrorCode::InvalidArgument, "topo_order: graph contains a cycle");
  return order;
}

namespace {

std::set<std::string> ancestors_inclusive(const ModelGraph& g, const std::string& start) {
  std::set<std::string> seen;
  std::vector<std::string> stack{start};
  while (!stack.empty()) {
    const std::string cur = stack.back();
    stack.pop_back();
    if (!seen.insert(cur).second || cur == "input") continue;
    for (const std::string& in : g.node(cur).inputs) stack.push_back(in);
  }
  return seen;
}

std::set<std::string> descendants_inclusive(const ModelGraph& g, const std::string& start) {
  std::set<std::string> seen;
  std::vector<std::string> stack{start};
  while (!stack.empty()) {
    const std::string cur = stack.back();
    stack.pop_back();
    if (!seen.insert(cur).second) continue;
    for (const std::string& c : g.consumers(cur)) stack.push_back(c);
  }
  return seen;
}

bool is_weight_layer(const GraphNode& n) { return n.kind == "conv2d" || n.kind == "linear"; }

}  // namespace

std::map<std::string, TensorF> bn_gamma_by_producer(const Model& model) {
  std::map<std::string, TensorF> out;
  for (const GraphNode& n : model.graph.nodes)
    if (n.kind == "bn") out[n.inputs[0]] = model.weights.f32(n.gamma);
  return out;
}

std::vector<BlockUnit> partition_blocks(const ModelGraph& graph) {
  const std::vector<std::string> order = topo_order(graph);
  std::map<std::string, Index> pos;
  for (Index i = 0; i < static_cast<Index>(order.size()); ++i) pos[order[i]] = i;

  std::map<std::string, int> unit_of;
  std::vector<std::vector<std::string>> members;

  // Residual subgraphs: everything on a path from the fork (the latest common
  // source of the add's operands) to the add becomes one unit.
  for (const std::string& id : order) {
    const GraphNode& n = graph.node(id);
    if (n.kind != "add") continue;
    const std::set<std::string> anc0 = ancestors_inclusive(graph, n.inputs[0]);
    const std::set<std::string> anc1 = ancestors_inclusive(graph, n.inputs[1]);
    std::string fork;
    Index fork_pos = -2;
    for (const std::string& cand : anc0) {
      if (!anc1.count(cand)) continue;
      const Index p = cand == "input" ? -1 : pos.at(cand);
      if (p > fork_pos) {
        fork_pos = p;
        fork = cand;
      }
    }
    if (fork.empty())
      raise(ErrorCode::Contract, "partition_blocks: add node '" + id + "' has no common source");
    std::set<std::string> reach;
    if (fork == "input") {
      for (const std::string& m : order) reach.insert(m);
    } else {
      reach = descendants_inclusive(graph, fork);
    }
    const std::set<std::string> up = ancestors_inclusive(graph, id);
    std::vector<std::string> group;
    for (const std::string& m : order)
      if (m != fork && reach.count(m) && up.count(m)) group.push_back(m);
    for (const std::string& m : group)
      if (unit_of.count(m))
        raise(ErrorCode::Contract, "partition_blocks: overlapping residual groups at '" + m + "'");
    const int idx = static_cast<int>(members.size());
    for (const std::string& m : group) unit_of[m] = idx;
    members.push_back(std::move(group));
  }

  // Remaining weight layers form singleton units; glue joins its producer.
  for (const std::string& id : order) {
    if (unit_of.count(id)) continue;
    const GraphNode& n = graph.node(id);
    if (is_weight_layer(n)) {
      unit_of[id] = static_cast<int>(members.size());
      members.push_back({id});
    } else {
      const std::string& prod = n.inputs[0];
      auto it = unit_of.find(prod);
      if (it != unit_of.end()) {
        unit_of[id] = it->second;
        members[static_cast<std::size_t>(it->second)].push_back(id);
      }
      // glue ahead of the first layer resolves against a consumer below
    }
  }
  for (auto rit = order.rbegin(); rit != order.rend(); ++rit) {
    const std::string& id = *rit;
    if (unit_of.count(id)) continue;
    int target = -1;
    for (const std::string& c : graph.consumers(id))
      if (unit_of.count(c)) {
        target = unit_of.at(c);
        break;
      }
    if (target < 0)
      raise(ErrorCode::Contract, "partition_blocks: node '" + id + "' reaches no weight layer");
    unit_of[id] = target;
    members[static_cast<std::size_t>(target)].push_back(id);
  }

  std::vector<BlockUnit> units;
  for (std::vector<std::string>& group : members) {
    std::sort(group.begin(), group.end(),
              [&pos](const std::string& a, const std::string& b) { return pos.at(a) < pos.at(b); });
    BlockUnit u;
    u.node_ids = group;
    for (const std::string& m : group)
      if (is_weight_layer(graph.node(m))) u.layer_ids.push_back(m);
    if (u.layer_ids.empty())
      raise(ErrorCode::Contract, "partition_blocks: unit without a weight layer");
    u.output_id = group.back();
    u.id = u.output_id;
    const std::set<std::string> inside(group.begin(), group.end());
    for (const std::string& m : group)
      for (const std::string& in : graph.node(m).inputs)
        if (!inside.count(in) &&
            std::find(u.boundary_inputs.begin(), u.boundary_inputs.end(), in) ==
                u.boundary_inputs.end())
          u.boundary_inputs.push_back(in);
    units.push_back(std::move(u));
  }
  std::sort(units.begin(), units.end(), [&pos](const BlockUnit& a, const BlockUnit& b) {
    return pos.at(a.node_ids.front()) < pos.at(b.node_ids.front());
  });
  return units;
}

void extract_unit_gamma(std::vector<BlockUnit>& units,
                        const std::map<std::string, TensorF>& gamma_by_layer) {
  TensorF last_seen;
  bool have = false;
  for (BlockUnit& u : units) {
    u.gamma = TensorF();
    u.gamma_fallback = false;
    for (auto rit = u.layer_ids.rbegin(); rit != u.layer_ids.rend(); ++rit) {
      auto it = gamma_by_layer.find(*rit);
      if (it != gamma_by_layer.end()) {
        u.gamma = it->second;
        break;
      }
    }
    if (u.gamma.numel() == 0) {
      u.gamma_fallback = true;
      if (have) u.gamma = last_seen;
    } else {
      last_seen = u.gamma;
      have = true;
    }
    u.channel_count = u.gamma.numel();
  }
}

double compute_p_value(const TensorF& gamma, double alpha, double beta_shift) {
  if (!(alpha > 0.0) || alpha > 1.0)
    raise(ErrorCode::InvalidArgument, "compute_p_value: alpha must be in (0, 1]");
  if (gamma.numel() == 0) raise(ErrorCode::InvalidArgument, "compute_p_value: empty gamma");
  double mean = 0.0;
  for (Index i = 0; i < gamma.numel(); ++i) mean += gamma[i];
  mean /= static_cast<double>(gamma.numel());
  const double raw = 1.0 + alpha * sigmoid(mean - beta_shift);
  double p = std::round(raw * 100.0) / 100.0;
  if (p <= 1.0) p = 1.01;
  const double hi = 1.0 + alpha;
  if (p > hi) p = std::floor(hi * 100.0 + 1e-9) / 100.0;
  return p;
}

void assign_p_values(std::vector<BlockUnit>& units, double alpha, double beta_shift) {
  const TensorF unit_scale = TensorF::from_values({1}, {1.0f});
  for (BlockUnit& u : units) {
    const TensorF& g = u.gamma.numel() > 0 ? u.gamma : unit_scale;
    u.p_value = compute_p_value(g, alpha, beta_shift);
  }
}

}  // namespace rapq
