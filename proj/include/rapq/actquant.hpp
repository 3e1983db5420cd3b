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

#ifndef RAPQ_ACTQUANT_HPP
#define RAPQ_ACTQUANT_HPP

#include <map>
#include <string>
#include <vector>

#include "rapq/blocks.hpp"
#include "rapq/model_io.hpp"
#include "rapq/quantizer.hpp"
#include "rapq/rng.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

// The clipped branches of the printed scale gradient and of the derivative
// obtained by differentiating the clipped affine form disagree; both are
// available and selectable per run.
enum class GradVariant { Paper, Derived };

// One per-tensor activation quantizer with a trainable scale exponent.
struct ActQuantizer {
  std::string node_id;      // producing node; "input" for the image tensor
  QuantParams q;            // per-tensor, asymmetric-unsigned
  double log2_scale = 0.0;  // real while training, integral once hardened
  double calib_min = 0.0;   // pool minimum feeding the zero-point
};

// Quantize-dequantize at the quantizer's current scale. mask, when given,
// gets 1 where the rounded code stays in range and 0 where clipping bites:
// the straight-through pass factor.
TensorF qdq_act(const TensorF& x, const QuantParams& q, TensorF* mask = nullptr);

// Elementwise d x_hat / d log2(s) under the frozen-rounding approximation.
TensorF act_scale_grad(const TensorF& x, const QuantParams& q, GradVariant variant);

struct ActOptConfig {
  int act_bits = 4;
  Index iters = 5000;  // consumed exactly by every unit owning a site
  Index batch = 32;
  double lr = 4e-5;
  GradVariant variant = GradVariant::Paper;
  Index pool_chunk = 256;
};

// Which activations get a quantizer, and which unit's reconstruction loss
// trains each one. Sites: the graph input, every relu output, and every add
// output not absorbed by a sole relu consumer.
struct ActSitePlan {
  std::vector<std::string> site_ids;              // discovery order
  std::map<std::string, std::size_t> owner_unit;  // site id -> unit index
};

ActSitePlan plan_act_sites(const ModelGraph& graph, const std::vector<BlockUnit>& units);

struct ActSiteReport {
  std::string node_id;
  std::size_t unit_index = 0;
  int init_exponent = 0;
  int final_exponent = 0;
  double loss_init = 0.0;  // unit pool loss at the initial integer exponents
  double loss_best = 0.0;  // unit pool loss at the returned exponents
  Index iterations = 0;
  Index tuples_tried = 0;
};

struct ActQuantResult {
  std::vector<ActQuant> acts;  // hardened, in site discovery order
  std::vector<ActSiteReport> sites;
  std::vector<std::string> events;
};

// Per-unit descent on each site's log2 scale against the FP unit output,
// earlier sites frozen, weights already replaced by their dequantized
// counterparts. The returned exponent per site is the best pool-loss
// iterate, double-checked against its +-1 neighbourhood.
ActQuantResult optimize_act_scales(const Model& folded, const std::vector<BlockUnit>& units,
                                   const std::map<std::string, TensorF>& dequant_weights,
                                   const TensorF& pool, const ActOptConfig& cfg, Rng& rng);

// Baseline path: power-of-two activation parameters taken straight from the
// MSE float initialization over the FP activations (nearest exponent, zero
// point from the pool minimum), no optimization.
ActQuantResult naive_act_scales(const Model& folded, const std::vector<BlockUnit>& units,
                                const TensorF& pool, int act_bits, Index pool_chunk = 256);

}  // namespace rapq

#endif  // RAPQ_ACTQUANT_HPP
