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

#include "rapq/nn.hpp"

#include <algorithm>
#include <cmath>

namespace rapq {

namespace {

using ConstMatMap = Eigen::Map<const MatrixF>;
using MatMap = Eigen::Map<MatrixF>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;
using VecMap = Eigen::Map<Eigen::VectorXf>;

}  // namespace

ConvDims conv_dims(const Shape& input, const Shape& weight, Index stride, Index pad) {
  if (input.size() != 4 || weight.size() != 4)
    raise(ErrorCode::ShapeMismatch, "conv2d expects NCHW input and OIHW weight, got " +
                                        shape_string(input) + " and " + shape_string(weight));
  if (stride < 1) raise(ErrorCode::InvalidArgument, "stride must be >= 1");
  if (pad < 0) raise(ErrorCode::InvalidArgument, "pad must be >= 0");
  if (input[1] != weight[1])
    raise(ErrorCode::ShapeMismatch, "conv2d channel mismatch: input " + shape_string(input) +
                                        " vs weight " + shape_string(weight));
  ConvDims d;
  d.batch = input[0];
  d.in_ch = input[1];
  d.in_h = input[2];
  d.in_w = input[3];
  d.out_ch = weight[0];
  d.k_h = weight[2];
  d.k_w = weight[3];
  d.stride = stride;
  d.pad = pad;
  d.out_h = (d.in_h + 2 * pad - d.k_h) / stride + 1;
  d.out_w = (d.in_w + 2 * pad - d.k_w) / stride + 1;
  if (d.in_h + 2 * pad < d.k_h || d.in_w + 2 * pad < d.k_w || d.out_h < 1 || d.out_w < 1)
    raise(ErrorCode::ShapeMismatch, "conv2d output would be empty for input " +
                                        shape_string(input) + " and weight " +
                                        shape_string(weight));
  return d;
}

MatrixF im2col(const TensorF& input, const ConvDims& d) {
  const Index rows = d.batch * d.out_spatial();
  MatrixF cols = MatrixF::Zero(rows, d.patch());
  const float* in = input.data();
  const Index in_plane = d.in_h * d.in_w;
  const Index in_sample = d.in_ch * in_plane;

  for (Index n = 0; n < d.batch; ++n) {
    for (Index c = 0; c < d.in_ch; ++c) {
      for (Index kh = 0; kh < d.k_h; ++kh) {
        for (Index kw = 0; kw < d.k_w; ++kw) {
          const Index k = (c * d.k_h + kh) * d.k_w + kw;
          float* dst = cols.data() + k * rows + n * d.out_spatial();
          for (Index oh = 0; oh < d.out_h; ++oh) {
            const Index ih = oh * d.stride + kh - d.pad;
            if (ih < 0 || ih >= d.in_h) continue;  // stays zero (padding)
            const float* src_row = in + n * in_sample + c * in_plane + ih * d.in_w;
            float* dst_row = dst + oh * d.out_w;
            for (Index ow = 0; ow < d.out_w; ++ow) {
              const Index iw = ow * d.stride + kw - d.pad;
              if (iw < 0 || iw >= d.in_w) continue;
              dst_row[ow] = src_row[iw];
            }
          }
        }
      }
    }
  }
  return cols;
}

TensorF conv2d_from_cols(const MatrixF& cols, const TensorF& weight, const TensorF& bias,
                         const ConvDims& d) {
  const Index rows = d.batch * d.out_spatial();
  ConstMatMap w_map(weight.data(), d.patch(), d.out_ch);  // OIHW blob viewed as patch x out_ch
  MatrixF out_mat = cols * w_map;                         // rows x out_ch

  TensorF out({d.batch, d.out_ch, d.out_h, d.out_w});
  const Index p = d.out_spatial();
  for (Index n = 0; n < d.batch; ++n) {
    for (Index o = 0; o < d.out_ch; ++o) {
      const float b = bias.numel() ? bias[o] : 0.0f;
      const float* src = out_mat.data() + o * rows + n * p;
      float* dst = out.data() + (n * d.out_ch + o) * p;
      for (Index i = 0; i < p; ++i) dst[i] = src[i] + b;
    }
  }
  return out;
}

TensorF conv2d_forward(const TensorF& input, const TensorF& weight, const TensorF& bias,
                       Index stride, Index pad) {
  input.require_finite("conv2d_forward input");
  weight.require_finite("conv2d_forward weight");
  ConvDims d = conv_dims(input.shape(), weight.shape(), stride, pad);
  if (bias.numel() != 0 && bias.numel() != d.out_ch)
    raise(ErrorCode::ShapeMismatch, "conv2d bias " + shape_string(bias.shape()) +
                                        " does not match out_ch " + std::to_string(d.out_ch));
  return conv2d_from_cols(im2col(input, d), weight, bias, d);
}

namespace {

// grad_output NCHW rearranged to (batch*out_spatial) x out_ch, matching im2col rows.
MatrixF grad_output_matrix(const TensorF& grad_output, const ConvDims& d) {
  const Index rows = d.batch * d.out_spatial();
  const Index p = d.out_spatial();
  MatrixF g(rows, d.out_ch);
  for (Index n = 0; n < d.batch; ++n) {
    for (Index o = 0; o < d.out_ch; ++o) {
      const float* src = grad_output.data() + (n * d.out_ch + o) * p;
      float* dst = g.data() + o * rows + n * p;
      std::copy(src, src + p, dst);
    }
  }
  return g;
}

}  // namespace

TensorF conv2d_grad_weight_from_cols(const MatrixF& cols, const TensorF& grad_output,
                                     const ConvDims& d) {
  MatrixF g = grad_output_matrix(grad_output, d);
  TensorF grad_w({d.out_ch, d.in_ch, d.k_h, d.k_w});
  MatMap gw_map(grad_w.data(), d.patch(), d.out_ch);
  gw_map.noalias() = cols.transpose() * g;
  return grad_w;
}

TensorF conv2d_grad_input(const TensorF& weight, const TensorF& grad_output, const ConvDims& d) {
  const Index rows = d.batch * d.out_spatial();
  ConstMatMap w_map(weight.data(), d.patch(), d.out_ch);
  MatrixF g = grad_output_matrix(grad_output, d);
  MatrixF d_cols = g * w_map.transpose();  // rows x patch

  TensorF grad_in({d.batch, d.in_ch, d.in_h, d.in_w});
  float* gi = grad_in.data();
  const Index in_plane = d.in_h * d.in_w;
  const Index in_sample = d.in_ch * in_plane;
  for (Index n = 0; n < d.batch; ++n) {
    for (Index c = 0; c < d.in_ch; ++c) {
      for (Index kh = 0; kh < d.k_h; ++kh) {
        for (Index kw = 0; kw < d.k_w; ++kw) {
          const Index k = (c * d.k_h + kh) * d.k_w + kw;
          const float* src = d_cols.data() + k * rows + n * d.out_spatial();
          for (Index oh = 0; oh < d.out_h; ++oh) {
            const Index ih = oh * d.stride + kh - d.pad;
            if (ih < 0 || ih >= d.in_h) continue;
            float* dst_row = gi + n * in_sample + c * in_plane + ih * d.in_w;
            const float* src_row = src + oh * d.out_w;
            for (Index ow = 0; ow < d.out_w; ++ow) {
              const Index iw = ow * d.stride + kw - d.pad;
              if (iw < 0 || iw >= d.in_w) continue;
              dst_row[iw] += src_row[ow];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

TensorF conv2d_grad_bias(const TensorF& grad_output) {
  const Shape& s = grad_output.shape();
  TensorF grad_b({s[1]});
  const Index p = s[2] * s[3];
  for (Index n = 0; n < s[0]; ++n)
    for (Index o = 0; o < s[1]; ++o) {
      const float* src = grad_output.data() + (n * s[1] + o) * p;
      float acc = 0.0f;
      for (Index i = 0; i < p; ++i) acc += src[i];
      grad_b[o] += acc;
    }
  return grad_b;
}

Conv2dGrads conv2d_grad(const TensorF& input, const TensorF& weight, const TensorF& grad_output,
                        Index stride, Index pad) {
  input.require_finite("conv2d_grad input");
  grad_output.require_finite("conv2d_grad grad_output");
  ConvDims d = conv_dims(input.shape(), weight.shape(), stride, pad);
  const Shape expect{d.batch, d.out_ch, d.out_h, d.out_w};
  if (grad_output.shape() != expect)
    raise(ErrorCode::ShapeMismatch, "conv2d_grad grad_output " +
                                        shape_string(grad_output.shape()) + " expected " +
                                        shape_string(expect));
  MatrixF cols = im2col(input, d);
  Conv2dGrads grads;
  grads.weight = conv2d_grad_weight_from_cols(cols, grad_output, d);
  grads.input = conv2d_grad_input(weight, grad_output, d);
  grads.bias = conv2d_grad_bias(grad_output);
  return grads;
}

TensorF relu(const TensorF& x) {
  return TensorF(x.shape(), x.array().max(0.0f));
}

TensorF relu_grad(const TensorF& x, const TensorF& grad_out) {
  require_same_shape(x, grad_out, "relu_grad");
  return TensorF(x.shape(), (x.array() > 0.0f).select(grad_out.array(), 0.0f));
}

TensorF linear_forward(const TensorF& input, const TensorF& weight, const TensorF& bias) {
  if (input.ndim() != 2 || weight.ndim() != 2 || input.dim(1) != weight.dim(1))
    raise(ErrorCode::ShapeMismatch, "linear: input " + shape_string(input.shape()) +
                                        " vs weight " + shape_string(weight.shape()));
  const Index n = input.dim(0), f = input.dim(1), o = weight.dim(0);
  ConstMatMap x_map(input.data(), f, n);
  ConstMatMap w_map(weight.data(), f, o);
  TensorF out({n, o});
  MatMap out_map(out.data(), o, n);
  out_map.noalias() = w_map.transpose() * x_map;
  if (bias.numel()) out_map.colwise() += ConstVecMap(bias.data(), o);
  return out;
}

LinearGrads linear_grad(const TensorF& input, const TensorF& weight, const TensorF& grad_output) {
  const Index n = input.dim(0), f = input.dim(1), o = weight.dim(0);
  if (grad_output.shape() != Shape{n, o})
    raise(ErrorCode::ShapeMismatch,
          "linear_grad grad_output " + shape_string(grad_output.shape()));
  ConstMatMap x_map(input.data(), f, n);
  ConstMatMap w_map(weight.data(), f, o);
  ConstMatMap g_map(grad_output.data(), o, n);

  LinearGrads grads;
  grads.weight = TensorF({o, f});
  MatMap gw(grads.weight.data(), f, o);
  gw.noalias() = x_map * g_map.transpose();
  grads.input = TensorF({n, f});
  MatMap gi(grads.input.data(), f, n);
  gi.noalias() = w_map * g_map;
  grads.bias = TensorF({o});
  VecMap(grads.bias.data(), o) = g_map.rowwise().sum();
  return grads;
}

void BNParams::validate() const {
  const Index c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
    raise(ErrorCode::ShapeMismatch, "BN per-channel vectors disagree on channel count");
  if ((running_var < 0.0f).any())
    raise(ErrorCode::InvalidArgument, "BN running variance has negative entries");
  if (epsilon < 0.0f) raise(ErrorCode::InvalidArgument, "BN epsilon must be >= 0");
}

void fold_bn(TensorF& weight, TensorF& bias, const BNParams& bn) {
  bn.validate();
  const Index out_ch = weight.dim(0);
  if (bn.channels() != out_ch || bias.numel() != out_ch)
    raise(ErrorCode::ShapeMismatch, "fold_bn: " + std::to_string(bn.channels()) +
                                        " BN channels vs weight " +
                                        shape_string(weight.shape()));
  const Index per_ch = weight.numel() / out_ch;
  for (Index o = 0; o < out_ch; ++o) {
    const float denom = std::sqrt(bn.running_var[o] + bn.epsilon);
    if (denom == 0.0f) raise(ErrorCode::InvalidArgument, "fold_bn: zero variance and epsilon");
    const float scale = bn.gamma[o] / denom;
    float* w = weight.data() + o * per_ch;
    for (Index i = 0; i < per_ch; ++i) w[i] *= scale;
    bias[o] = (bias[o] - bn.running_mean[o]) * scale + bn.beta[o];
  }
}

TensorF bn_forward_infer(const TensorF& x, const BNParams& bn) {
  bn.validate();
  const Index c = x.dim(1);
  if (bn.channels() != c)
    raise(ErrorCode::ShapeMismatch, "bn_forward_infer: channel mismatch");
  TensorF out(x.shape());
  const Index plane = x.numel() / (x.dim(0) * c);
  for (Index n = 0; n < x.dim(0); ++n)
    for (Index ch = 0; ch < c; ++ch) {
      const float a = bn.gamma[ch] / std::sqrt(bn.running_var[ch] + bn.epsilon);
      const float b = bn.beta[ch] - bn.running_mean[ch] * a;
      const float* src = x.data() + (n * c + ch) * plane;
      float* dst = out.data() + (n * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) dst[i] = src[i] * a + b;
    }
  return out;
}

TensorF bn_forward_train(const TensorF& x, const ArrayXf& gamma, const ArrayXf& beta, float eps,
                         BNTrainCache& cache) {
  const Index n = x.dim(0), c = x.dim(1);
  const Index plane = x.numel() / (n * c);
  const Index m = n * plane;
  cache.mean = ArrayXf::Zero(c);
  cache.inv_std = ArrayXf::Zero(c);
  cache.x_hat = TensorF(x.shape());

  for (Index ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (Index b = 0; b < n; ++b) {
      const float* src = x.data() + (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) {
        sum += src[i];
        sq += static_cast<double>(src[i]) * src[i];
      }
    }
    const double mean = sum / m;
    const double var = std::max(0.0, sq / m - mean * mean);
    cache.mean[ch] = static_cast<float>(mean);
    cache.inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
  }

  TensorF out(x.shape());
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      const float* src = x.data() + (b * c + ch) * plane;
      float* xh = cache.x_hat.data() + (b * c + ch) * plane;
      float* dst = out.data() + (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) {
        xh[i] = (src[i] - cache.mean[ch]) * cache.inv_std[ch];
        dst[i] = xh[i] * gamma[ch] + beta[ch];
      }
    }
  return out;
}

BNGrads bn_backward(const TensorF& grad_out, const ArrayXf& gamma, const BNTrainCache& cache) {
  const Index n = grad_out.dim(0), c = grad_out.dim(1);
  const Index plane = grad_out.numel() / (n * c);
  const Index m = n * plane;

  BNGrads grads;
  grads.gamma = ArrayXf::Zero(c);
  grads.beta = ArrayXf::Zero(c);
  grads.input = TensorF(grad_out.shape());

  for (Index ch = 0; ch < c; ++ch) {
    double dg = 0.0, db = 0.0;
    for (Index b = 0; b < n; ++b) {
      const float* g = grad_out.data() + (b * c + ch) * plane;
      const float* xh = cache.x_hat.data() + (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) {
        dg += static_cast<double>(g[i]) * xh[i];
        db += g[i];
      }
    }
    grads.gamma[ch] = static_cast<float>(dg);
    grads.beta[ch] = static_cast<float>(db);
    const float k = gamma[ch] * cache.inv_std[ch];
    const float mean_db = static_cast<float>(db / m);
    const float mean_dg = static_cast<float>(dg / m);
    for (Index b = 0; b < n; ++b) {
      const float* g = grad_out.data() + (b * c + ch) * plane;
      const float* xh = cache.x_hat.data() + (b * c + ch) * plane;
      float* gi = grads.input.data() + (b * c + ch) * plane;
      for (Index i = 0; i < plane; ++i) gi[i] = k * (g[i] - mean_db - xh[i] * mean_dg);
    }
  }
  return grads;
}

SoftmaxXent softmax_cross_entropy(const TensorF& logits, const std::vector<int>& labels) {
  const Index n = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n)
    raise(ErrorCode::ShapeMismatch, "softmax_cross_entropy: label count mismatch");
  SoftmaxXent result;
  result.grad_logits = TensorF({n, c});
  double total = 0.0;
  for (Index b = 0; b < n; ++b) {
    const float* row = logits.data() + b * c;
    float mx = row[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (Index j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= c) raise(ErrorCode::InvalidArgument, "label out of range");
    total += std::log(denom) - (row[y] - mx);
    float* g = result.grad_logits.data() + b * c;
    for (Index j = 0; j < c; ++j) {
      const double p = std::exp(static_cast<double>(row[j] - mx)) / denom;
      g[j] = static_cast<float>((p - (j == y ? 1.0 : 0.0)) / n);
    }
  }
  result.loss = static_cast<float>(total / n);
  return result;
}

}  // namespace rapq
