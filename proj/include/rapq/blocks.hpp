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

#ifndef RAPQ_BLOCKS_HPP
#define RAPQ_BLOCKS_HPP

#include <map>
#include <string>
#include <vector>

#include "rapq/model_io.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

// One reconstruction unit: either a residual subgraph (everything strictly
// after the fork up to and including the add, plus trailing glue) or a single
// conv/linear layer together with the glue nodes hanging off it.
struct BlockUnit {
  std::string id;                            // same as output_id
  std::vector<std::string> node_ids;         // members, topologically ordered
  std::vector<std::string> layer_ids;        // conv2d/linear members
  std::vector<std::string> boundary_inputs;  // external tensors the unit reads
  std::string output_id;
  TensorF gamma;                // per-channel BN scales driving p_value
  bool gamma_fallback = false;  // borrowed from an earlier unit, or default
  double p_value = 2.0;
  Index channel_count = 0;
};

// Deterministic Kahn ordering over node ids ("input" excluded).
std::vector<std::string> topo_order(const ModelGraph& graph);

// BN gamma vectors keyed by the conv/linear feeding each BN node, captured
// before folding so the statistics survive into the folded graph.
std::map<std::string, TensorF> bn_gamma_by_producer(const Model& model);

// Every node lands in exactly one unit; units come back topologically ordered
// and each contains at least one weight layer.
std::vector<BlockUnit> partition_blocks(const ModelGraph& graph);

// Picks each unit's gamma from its last BN-backed layer; units without one
// inherit the nearest preceding unit's gamma and are flagged as fallback.
void extract_unit_gamma(std::vector<BlockUnit>& units,
                        const std::map<std::string, TensorF>& gamma_by_layer);

// 1 + alpha * sigmoid(mean(gamma) - beta_shift), rounded to two decimals and
// kept inside (1, 1 + alpha].
double compute_p_value(const TensorF& gamma, double alpha, double beta_shift);

// Fills p_value for every unit. Units with no gamma anywhere (no BN in the
// model) use a default of mean-gamma = 1.
void assign_p_values(std::vector<BlockUnit>& units, double alpha, double beta_shift);

}  // namespace rapq

#endif  // RAPQ_BLOCKS_HPP
