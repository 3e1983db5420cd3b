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

#ifndef RAPQ_RECONSTRUCT_HPP
#define RAPQ_RECONSTRUCT_HPP

#include <map>
#include <string>
#include <vector>

#include "rapq/blocks.hpp"
#include "rapq/executor.hpp"
#include "rapq/model_io.hpp"
#include "rapq/rng.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

// Sum of |a - b|^p over all elements, divided by the batch count (dim 0).
// p = 1 regresses the median, p = 2 the mean. Valid for p in [1, 2].
double lp_loss(const TensorF& a, const TensorF& b, double p);

// d(lp_loss)/da; subgradient 0 where the residual vanishes.
TensorF lp_loss_grad(const TensorF& a, const TensorF& b, double p);

struct ReconstructConfig {
  int weight_bits = 2;
  Index iters_scale = 16000;  // phase 1: scale-exponent search over v
  Index iters_round = 64000;  // phase 2: rounding descent over u
  Index batch = 32;
  double lr_u = 1e-3;
  double lr_v = 1e-2;
  double mu = 0.01;      // phase-1 regularizer weight
  double lambda = 0.01;  // phase-2 regularizer weight
  double warm_frac = 0.2;
};

struct UnitReport {
  std::string unit_id;
  double p_value = 2.0;
  double loss_init = 0.0;         // soft loss at init over the full pool
  double loss_scale_phase = 0.0;  // after the exponents freeze
  double loss_round_phase = 0.0;  // soft loss at the end of phase 2
  double loss_hardened = 0.0;
  double loss_naive = 0.0;  // nearest-rounding power-of-two baseline
  double h1_binary_1e3 = 0.0;
  double loose_fraction = 0.0;
  bool exponents_in_band = true;  // every exponent in {floor(log2 s), +1}
  bool fell_back_to_naive = false;
  Index iterations_scale = 0;
  Index iterations_round = 0;
  std::vector<std::string> events;
};

struct UnitResult {
  std::vector<LayerQuant> layers;
  std::map<std::string, TensorF> dequant_weights;  // blob name -> hardened w
  UnitReport report;
};

// Two-phase descent for one unit. boundary holds pool-sized tensors for each
// of the unit's boundary inputs; target is the unit's FP output over the pool.
UnitResult optimize_unit(const Model& folded, const BlockUnit& unit,
                         const std::map<std::string, TensorF>& boundary, const TensorF& target,
                         const ReconstructConfig& cfg, Rng& rng);

struct ReconstructResult {
  std::vector<LayerQuant> layers;
  std::vector<UnitReport> reports;
  std::map<std::string, TensorF> dequant_weights;
};

// Processes units in topological order; each unit sees boundary inputs from
// the already-quantized prefix while targets come from the FP model.
ReconstructResult reconstruct_weights(const Model& folded, const std::vector<BlockUnit>& units,
                                      const TensorF& pool, const ReconstructConfig& cfg, Rng& rng);

// Rounds every layer to the nearest code on a power-of-two grid taken from
// the MSE scale init, with no descent. The ablation/report baseline.
ReconstructResult naive_quantize_weights(const Model& folded, const std::vector<BlockUnit>& units,
                                         const TensorF& pool, int weight_bits);

}  // namespace rapq

#endif  // RAPQ_RECONSTRUCT_HPP
