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

#ifndef RAPQ_NN_HPP
#define RAPQ_NN_HPP

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "rapq/tensor.hpp"

namespace rapq {

using MatrixF = Eigen::MatrixXf;
using ArrayXf = Eigen::ArrayXf;

/// Geometry of one cross-correlation, validated against both operand shapes.
struct ConvDims {
  Index batch{}, in_ch{}, in_h{}, in_w{};
  Index out_ch{}, k_h{}, k_w{};
  Index out_h{}, out_w{};
  Index stride{1}, pad{0};

  Index patch() const { return in_ch * k_h * k_w; }         // K
  Index out_spatial() const { return out_h * out_w; }       // P
};

ConvDims conv_dims(const Shape& input, const Shape& weight, Index stride, Index pad);

/// Unrolls NCHW input into a (batch * out_spatial) x patch matrix so the
/// convolution becomes a single GEMM against the OIHW weight viewed as
/// patch x out_ch.
MatrixF im2col(const TensorF& input, const ConvDims& d);

TensorF conv2d_from_cols(const MatrixF& cols, const TensorF& weight, const TensorF& bias,
                         const ConvDims& d);

TensorF conv2d_forward(const TensorF& input, const TensorF& weight, const TensorF& bias,
                       Index stride, Index pad);

struct Conv2dGrads {
  TensorF weight;
  TensorF input;
  TensorF bias;
};

Conv2dGrads conv2d_grad(const TensorF& input, const TensorF& weight, const TensorF& grad_output,
                        Index stride, Index pad);

/// Gradient pieces split out so callers that cache im2col matrices can skip
/// the parts they do not need.
TensorF conv2d_grad_weight_from_cols(const MatrixF& cols, const TensorF& grad_output,
                                     const ConvDims& d);
TensorF conv2d_grad_input(const TensorF& weight, const TensorF& grad_output, const ConvDims& d);
TensorF conv2d_grad_bias(const TensorF& grad_output);

TensorF relu(const TensorF& x);
// Subgradient at 0 is 0.
TensorF relu_grad(const TensorF& x, const TensorF& grad_out);

TensorF linear_forward(const TensorF& input, const TensorF& weight, const TensorF& bias);

struct LinearGrads {
  TensorF weight;
  TensorF input;
  TensorF bias;
};

LinearGrads linear_grad(const TensorF& input, const TensorF& weight, const TensorF& grad_output);

/// Per-channel batch-norm statistics as stored in a trained model.
struct BNParams {
  ArrayXf gamma;
  ArrayXf beta;
  ArrayXf running_mean;
  ArrayXf running_var;
  float epsilon{1e-5f};

  Index channels() const { return gamma.size(); }
  void validate() const;
};

/// Fuses y = gamma * (conv(x) - mean) / sqrt(var + eps) + beta into the
/// convolution weights and bias.
void fold_bn(TensorF& weight, TensorF& bias, const BNParams& bn);

TensorF bn_forward_infer(const TensorF& x, const BNParams& bn);

struct BNTrainCache {
  ArrayXf mean;
  ArrayXf inv_std;
  TensorF x_hat;
};

TensorF bn_forward_train(const TensorF& x, const ArrayXf& gamma, const ArrayXf& beta, float eps,
                         BNTrainCache& cache);

struct BNGrads {
  TensorF input;
  ArrayXf gamma;
  ArrayXf beta;
};

BNGrads bn_backward(const TensorF& grad_out, const ArrayXf& gamma, const BNTrainCache& cache);

struct SoftmaxXent {
  float loss;
  TensorF grad_logits;  // gradient of the mean loss
};

SoftmaxXent softmax_cross_entropy(const TensorF& logits, const std::vector<int>& labels);

}  // namespace rapq

#endif  // RAPQ_NN_HPP
