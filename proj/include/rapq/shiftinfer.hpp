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

#ifndef RAPQ_SHIFTINFER_HPP
#define RAPQ_SHIFTINFER_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rapq/model_io.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

// Operation counters for the integer path. float_multiplies exists purely as
// an audit hook: the data path has no place that would bump it, and the
// equivalence harness asserts it stays zero.
struct IntPathStats {
  std::int64_t int_macs = 0;
  std::int64_t shifts = 0;
  std::int64_t float_multiplies = 0;
};

// Round-half-away-from-zero arithmetic right shift.
// k = 0 returns v unchanged; negative k is rejected.
std::int32_t rshift_round(std::int64_t v, int k);

// Raw conv/linear accumulators: value * 2^exponents[oc] is the real number.
// Accumulation runs in 64-bit and must land within int32; the analytic bound
// kernel_volume * (2^wb - 1) * (2^ab - 1) + |q_bias| is asserted per channel.
struct IntAccum {
  TensorI acc;                 // NCHW (conv) or NO (linear)
  std::vector<int> exponents;  // per output channel: e_w[oc] + e_x
};

IntAccum conv2d_int(const TensorI& codes, const QuantParams& x_q, const GraphNode& node,
                    const LayerQuant& lq, IntPathStats* stats);
IntAccum linear_int(const TensorI& codes, const QuantParams& x_q, const LayerQuant& lq,
                    const std::string& node_id, IntPathStats* stats);

// Integer inference taps: the stored low-bit codes at every activation site
// plus the dequantized logits (exact, power-of-two scaled).
struct IntTaps {
  std::map<std::string, TensorI> codes;
  TensorD logits;
};

// Quantizes the input with the image-site quantizer, then runs the whole
// graph on integers; every rescale is a bit-shift and the logits leave
// through one final exponent-scaled conversion.
IntTaps infer_int(const QuantizedModel& model, const TensorF& images,
                  IntPathStats* stats = nullptr);

// Independent double-precision simulation of the quantized model. All values
// it touches are power-of-two-scaled integers below 2^53, so its site codes
// and logits are exact and comparable bit-for-bit with the integer path.
IntTaps sim_quantized(const QuantizedModel& model, const TensorF& images);

struct EquivReport {
  bool ok = true;
  std::string first_mismatch_node;  // empty when ok
  double max_abs_dev = 0.0;
  std::int64_t mismatches = 0;
  IntPathStats stats;
};

// Bit-exact comparison of the integer path against the simulation at every
// activation site and at the logits.
EquivReport equivalence_check(const QuantizedModel& model, const TensorF& images);

// Site-by-site comparison in graph order; first mismatching site wins.
EquivReport compare_taps(const IntTaps& a, const IntTaps& b, const ModelGraph& graph);

// Top-1 accuracy of the integer path, evaluated in chunks.
double eval_quantized_accuracy(const QuantizedModel& model, const TensorF& images,
                               const TensorI& labels, Index chunk = 128);

// Raises unless every scale in the model is exactly a power of two.
void require_hardened(const QuantizedModel& model);

}  // namespace rapq

#endif  // RAPQ_SHIFTINFER_HPP
