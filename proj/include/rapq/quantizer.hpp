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

#ifndef RAPQ_QUANTIZER_HPP
#define RAPQ_QUANTIZER_HPP

#include <vector>

#include "rapq/tensor.hpp"

namespace rapq {

enum class Granularity { PerTensor, PerChannel };
enum class Signedness { AsymmetricUnsigned, Asymmetric };

// One uniform affine quantizer. Before hardening the scale is a free positive
// real (float_scale); after hardening it is exactly 2^exponent.
struct QuantParams {
  int bit_width = 8;
  bool hardened = false;
  int exponent = 0;
  double float_scale = 1.0;
  int zero_point = 0;
  int range_lo = 0;
  int range_hi = 255;
  Granularity granularity = Granularity::PerTensor;
  Signedness signedness = Signedness::AsymmetricUnsigned;

  double scale() const { return hardened ? std::ldexp(1.0, exponent) : float_scale; }
  void validate() const;
};

// Unsigned b-bit grid [0, 2^b - 1].
QuantParams make_quant_params(int bit_width, Granularity granularity, Signedness signedness);

struct QuantizeResult {
  TensorF x_hat;
  TensorI q_int;
};

// q_int = clip(round(x/s + z), n, p), x_hat = s * (q_int - z).
// Rounding is half-away-from-zero.
QuantizeResult quantize_affine(const TensorF& x, const QuantParams& q);

// Per-output-channel variant; qs[c] applies to slice c along dim 0.
QuantizeResult quantize_affine_channels(const TensorF& x, const std::vector<QuantParams>& qs);

// Nearest power-of-two exponent for a positive scale, ties to even.
int naive_pow2_scale(double s);

// z' = clip(round(-x_min / 2^exponent), n, p) after a scale change.
int update_zero_point(double x_min, int exponent, const QuantParams& q);

// Scans 100 clipping fractions of the observed range and keeps the (s, z)
// with the least squared reconstruction error. Constant data falls back to
// the 2^-16 scale floor.
QuantParams init_scale_mse(const float* data, Index count, int bit_width, Signedness signedness);
QuantParams init_scale_mse(const TensorF& samples, int bit_width, Signedness signedness);
std::vector<QuantParams> init_scale_mse_per_channel(const TensorF& weight, int bit_width);

struct ClipStats {
  Index clipped = 0;
  double max_round_err = 0.0;
};

ClipStats count_clip_round(const TensorF& x, const QuantParams& q);

constexpr double kScaleFloor = 1.52587890625e-05;  // 2^-16
constexpr int kScaleFloorExponent = -16;

}  // namespace rapq

#endif  // RAPQ_QUANTIZER_HPP
