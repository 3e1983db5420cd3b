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

#ifndef RAPQ_SOFTQUANT_HPP
#define RAPQ_SOFTQUANT_HPP

#include <cstdint>
#include <vector>

#include "rapq/quantizer.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

double sigmoid(double x);

// clip(sigmoid(x) * (xi - gamma) + gamma, 0, 1) with xi = 1.1, gamma = -0.1.
// Saturates to exactly 0 for sigmoid(x) <= 1/12 and to exactly 1 for
// sigmoid(x) >= 11/12, so trained values can reach the endpoints.
double rectified_sigmoid(double x);
double rectified_sigmoid_grad(double x);  // zero on the clipped regions
double inverse_rectified_sigmoid(double h);  // pre: h strictly inside (0, 1)
TensorF rectified_sigmoid(const TensorF& x);

// Annealed push-to-binary penalty: sum over elements of 1 - |2 h(x) - 1|^beta.
double regularizer(const TensorF& x, double beta_anneal);
TensorF regularizer_grad(const TensorF& x, double beta_anneal);

// Holds beta at 20 through the warm-up prefix, then cosine-decays to 2.
double anneal_schedule(Index iter, Index total, double warm_frac = 0.2);

// Trainable soft-quantization variables for one weight tensor.
// u has one entry per weight element, v one entry per output channel.
struct SoftQuantState {
  TensorF u;
  TensorF v;
  double xi = 1.1;
  double gamma_stretch = -0.1;
  double beta_anneal = 20.0;
  double lambda = 0.01;
  double mu = 0.01;
};

// Per-channel scale bookkeeping carried through the two training phases.
// Before freezing, the scale is 2^(base_exponent + h2(v)) and the zero-point
// rescales as a real; freezing pins the exponent and an integer zero-point.
struct ChannelScale {
  double float_scale = 1.0;
  int base_exponent = 0;
  int zero_point = 0;
  int hard_exponent = 0;
  int hard_zero = 0;
  bool frozen = false;
};

std::vector<ChannelScale> make_channel_scales(const std::vector<QuantParams>& init);

struct SoftWeightEval {
  TensorF w_tilde;
  std::vector<double> s_tilde;   // per channel
  std::vector<double> z_prime;   // per channel
  TensorF h1;
  TensorF h1_grad;
  TensorF code;                  // clip(floor(w/s_tilde + z') + h1, 0, 2^b-1)
  std::vector<std::uint8_t> unclipped;  // per element, 1 where code interior
  std::vector<double> h2;        // per channel
  std::vector<double> h2_grad;   // per channel
};

SoftWeightEval soft_weight(const TensorF& w, const std::vector<ChannelScale>& channels,
                           const SoftQuantState& state, int bit_width);

// Accumulates dL/du and dL/dv from dL/dw_tilde. Floor terms are held constant
// with respect to v, so the v-path is the scale chain only. grad_v is skipped
// when train_v is false (phase 2) or the channel is frozen.
void soft_weight_backward(const SoftWeightEval& eval, const TensorF& grad_w_tilde,
                          const std::vector<ChannelScale>& channels, bool train_v,
                          TensorF& grad_u, std::vector<double>& grad_v);

void init_v(const std::vector<ChannelScale>& channels, SoftQuantState& state);
void init_u(const TensorF& w, const std::vector<ChannelScale>& channels, SoftQuantState& state,
            int bit_width);

// Rounds h2 to pick each channel's exponent, then pins an integer zero-point.
void freeze_exponents(std::vector<ChannelScale>& channels, const SoftQuantState& state,
                      int bit_width);

struct HardenResult {
  std::vector<QuantParams> params;
  TensorI q_int;
  TensorF w_hat;
  double loose_fraction = 0.0;  // share of h1 values not within 0.01 of {0,1}
};

// pre: exponents frozen. Rounds h1 to {0,1} and emits integer weights.
HardenResult harden(const TensorF& w, const std::vector<ChannelScale>& channels,
                    const SoftQuantState& state, int bit_width);

}  // namespace rapq

#endif  // RAPQ_SOFTQUANT_HPP
