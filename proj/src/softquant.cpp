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

#include "rapq/softquant.hpp"

#include <algorithm>
#include <cmath>

#include "rapq/error.hpp"

namespace rapq {

namespace {

constexpr double kXi = 1.1;
constexpr double kGammaStretch = -0.1;
constexpr double kLn2 = 0.69314718055994530942;
constexpr double kPi = 3.14159265358979323846;

inline int clip_code(long long v, int p) {
  return static_cast<int>(std::clamp<long long>(v, 0, p));
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double rectified_sigmoid(double x) {
  const double y = sigmoid(x) * (kXi - kGammaStretch) + kGammaStretch;
  return std::clamp(y, 0.0, 1.0);
}

double rectified_sigmoid_grad(double x) {
  const double s = sigmoid(x);
  const double y = s * (kXi - kGammaStretch) + kGammaStretch;
  if (y <= 0.0 || y >= 1.0) return 0.0;
  return (kXi - kGammaStretch) * s * (1.0 - s);
}

double inverse_rectified_sigmoid(double h) {
  if (!(h > 0.0 && h < 1.0))
    raise(ErrorCode::InvalidArgument, "inverse_rectified_sigmoid: target must be in (0, 1)");
  const double s = (h - kGammaStretch) / (kXi - kGammaStretch);
  return std::log(s / (1.0 - s));
}

TensorF rectified_sigmoid(const TensorF& x) {
  TensorF out(x.shape());
  for (Index i = 0; i < x.numel(); ++i)
    out[i] = static_cast<float>(rectified_sigmoid(x[i]));
  return out;
}

double regularizer(const TensorF& x, double beta_anneal) {
  if (!(beta_anneal > 0.0))
    raise(ErrorCode::InvalidArgument, "regularizer: beta_anneal must be positive");
  double total = 0.0;
  for (Index i = 0; i < x.numel(); ++i) {
    const double t = 2.0 * rectified_sigmoid(x[i]) - 1.0;
    total += 1.0 - std::pow(std::abs(t), beta_anneal);
  }
  return total;
}

TensorF regularizer_grad(const TensorF& x, double beta_anneal) {
  if (!(beta_anneal > 0.0))
    raise(ErrorCode::InvalidArgument, "regularizer_grad: beta_anneal must be positive");
  TensorF grad(x.shape());
  for (Index i = 0; i < x.numel(); ++i) {
    const double t = 2.0 * rectified_sigmoid(x[i]) - 1.0;
    const double sgn = (t > 0.0) - (t < 0.0);
    const double d =
        -beta_anneal * std::pow(std::abs(t), beta_anneal - 1.0) * sgn * 2.0 *
        rectified_sigmoid_grad(x[i]);
    grad[i] = static_cast<float>(d);
  }
  return grad;
}

double anneal_schedule(Index iter, Index total, double warm_frac) {
  if (total <= 0 || iter < 0 || iter > total)
    raise(ErrorCode::InvalidArgument, "anneal_schedule: iter outside [0, total]");
  const double start = warm_frac * static_cast<double>(total);
  if (static_cast<double>(iter) <= start) return 20.0;
  double t = (static_cast<double>(iter) - start) / (static_cast<double>(total) - start);
  t = std::min(t, 1.0);
  return 2.0 + 18.0 * 0.5 * (1.0 + std::cos(kPi * t));
}

std::vector<ChannelScale> make_channel_scales(const std::vector<QuantParams>& init) {
  std::vector<ChannelScale> channels;
  channels.reserve(init.size());
  for (const QuantParams& q : init) {
    if (!(q.float_scale > 0.0))
      raise(ErrorCode::InvalidArgument, "make_channel_scales: scale must be positive");
    ChannelScale c;
    c.float_scale = q.float_scale;
    c.base_exponent = static_cast<int>(std::floor(std::log2(q.float_scale)));
    c.zero_point = q.zero_point;
    channels.push_back(c);
  }
  return channels;
}

SoftWeightEval soft_weight(const TensorF& w, const std::vector<ChannelScale>& channels,
                           const SoftQuantState& state, int bit_width) {
  const Index ch_count = w.dim(0);
  if (static_cast<Index>(channels.size()) != ch_count ||
      state.v.numel() != ch_count || !state.u.same_shape(w))
    raise(ErrorCode::ShapeMismatch, "soft_weight: state/channel shapes disagree with weights");
  const Index per_ch = w.numel() / ch_count;
  const int p = (1 << bit_width) - 1;

  SoftWeightEval ev;
  ev.w_tilde = TensorF(w.shape());
  ev.h1 = TensorF(w.shape());
  ev.h1_grad = TensorF(w.shape());
  ev.code = TensorF(w.shape());
  ev.unclipped.assign(static_cast<std::size_t>(w.numel()), 0);
  ev.s_tilde.resize(channels.size());
  ev.z_prime.resize(channels.size());
  ev.h2.resize(channels.size());
  ev.h2_grad.resize(channels.size());

  for (Index c = 0; c < ch_count; ++c) {
    const ChannelScale& cs = channels[static_cast<std::size_t>(c)];
    double s_tilde, z_prime;
    if (cs.frozen) {
      s_tilde = std::ldexp(1.0, cs.hard_exponent);
      z_prime = cs.hard_zero;
      ev.h2[c] = cs.hard_exponent - cs.base_exponent;
      ev.h2_grad[c] = 0.0;
    } else {
      if (!(cs.float_scale > 0.0))
        raise(ErrorCode::InvalidArgument, "soft_weight: channel scale must be positive");
      const double h2 = rectified_sigmoid(state.v[c]);
      s_tilde = std::exp2(cs.base_exponent + h2);
      z_prime = cs.float_scale * cs.zero_point / s_tilde;
      ev.h2[c] = h2;
      ev.h2_grad[c] = rectified_sigmoid_grad(state.v[c]);
    }
    ev.s_tilde[c] = s_tilde;
    ev.z_prime[c] = z_prime;

    for (Index i = c * per_ch; i < (c + 1) * per_ch; ++i) {
      const double h1 = rectified_sigmoid(state.u[i]);
      ev.h1[i] = static_cast<float>(h1);
      ev.h1_grad[i] = static_cast<float>(rectified_sigmoid_grad(state.u[i]));
      const double raw = std::floor(w[i] / s_tilde + z_prime) + h1;
      const double code = std::clamp(raw, 0.0, static_cast<double>(p));
      ev.code[i] = static_cast<float>(code);
      ev.unclipped[static_cast<std::size_t>(i)] = (raw >= 0.0 && raw <= p) ? 1 : 0;
      ev.w_tilde[i] = static_cast<float>(s_tilde * (code - z_prime));
    }
  }
  return ev;
}

void soft_weight_backward(const SoftWeightEval& eval, const TensorF& grad_w_tilde,
                          const std::vector<ChannelScale>& channels, bool train_v,
                          TensorF& grad_u, std::vector<double>& grad_v) {
  require_same_shape(eval.w_tilde, grad_w_tilde, "soft_weight_backward");
  const Index ch_count = static_cast<Index>(channels.size());
  const Index per_ch = eval.w_tilde.numel() / ch_count;
  if (!grad_u.same_shape(eval.w_tilde) || static_cast<Index>(grad_v.size()) != ch_count)
    raise(ErrorCode::ShapeMismatch, "soft_weight_backward: gradient buffers mismatched");

  for (Index c = 0; c < ch_count; ++c) {
    const double s_tilde = eval.s_tilde[c];
    const bool v_active =
        train_v && !channels[static_cast<std::size_t>(c)].frozen && eval.h2_grad[c] != 0.0;
    double dv = 0.0;
    for (Index i = c * per_ch; i < (c + 1) * per_ch; ++i) {
      const double g = grad_w_tilde[i];
      if (eval.unclipped[static_cast<std::size_t>(i)])
        grad_u[i] += static_cast<float>(g * s_tilde * eval.h1_grad[i]);
      if (v_active) dv += g * eval.code[i];
    }
    if (v_active) grad_v[static_cast<std::size_t>(c)] += kLn2 * eval.h2_grad[c] * s_tilde * dv;
  }
}

void init_v(const std::vector<ChannelScale>& channels, SoftQuantState& state) {
  state.v = TensorF({static_cast<Index>(channels.size())});
  for (std::size_t c = 0; c < channels.size(); ++c) {
    const ChannelScale& cs = channels[c];
    double target = std::log2(cs.float_scale) - cs.base_exponent;
    target = std::clamp(target, 0.01, 0.99);
    state.v[static_cast<Index>(c)] = static_cast<float>(inverse_rectified_sigmoid(target));
  }
}

void init_u(const TensorF& w, const std::vector<ChannelScale>& channels, SoftQuantState& state,
            int bit_width) {
  (void)bit_width;
  const Index ch_count = w.dim(0);
  if (static_cast<Index>(channels.size()) != ch_count)
    raise(ErrorCode::ShapeMismatch, "init_u: channel count mismatch");
  const Index per_ch = w.numel() / ch_count;
  state.u = TensorF(w.shape());
  for (Index c = 0; c < ch_count; ++c) {
    const ChannelScale& cs = channels[static_cast<std::size_t>(c)];
    double s_tilde, z_prime;
    if (cs.frozen) {
      s_tilde = std::ldexp(1.0, cs.hard_exponent);
      z_prime = cs.hard_zero;
    } else {
      const double h2 = rectified_sigmoid(state.v[c]);
      s_tilde = std::exp2(cs.base_exponent + h2);
      z_prime = cs.float_scale * cs.zero_point / s_tilde;
    }
    for (Index i = c * per_ch; i < (c + 1) * per_ch; ++i) {
      const double x = w[i] / s_tilde + z_prime;
      double target = x - std::floor(x);
      target = std::clamp(target, 0.01, 0.99);
      state.u[i] = static_cast<float>(inverse_rectified_sigmoid(target));
    }
  }
}

void freeze_exponents(std::vector<ChannelScale>& channels, const SoftQuantState& state,
                      int bit_width) {
  if (state.v.numel() != static_cast<Index>(channels.size()))
    raise(ErrorCode::ShapeMismatch, "freeze_exponents: v size mismatch");
  const int p = (1 << bit_width) - 1;
  for (std::size_t c = 0; c < channels.size(); ++c) {
    ChannelScale& cs = channels[c];
    const double h2 = rectified_sigmoid(state.v[static_cast<Index>(c)]);
    cs.hard_exponent = cs.base_exponent + static_cast<int>(std::round(h2));
    const double z_prime =
        cs.float_scale * cs.zero_point / std::ldexp(1.0, cs.hard_exponent);
    cs.hard_zero = clip_code(static_cast<long long>(std::round(z_prime)), p);
    cs.frozen = true;
  }
}

HardenResult harden(const TensorF& w, const std::vector<ChannelScale>& channels,
                    const SoftQuantState& state, int bit_width) {
  const Index ch_count = w.dim(0);
  if (static_cast<Index>(channels.size()) != ch_count || !state.u.same_shape(w))
    raise(ErrorCode::ShapeMismatch, "harden: state shapes disagree with weights");
  const Index per_ch = w.numel() / ch_count;
  const int p = (1 << bit_width) - 1;

  HardenResult out;
  out.q_int = TensorI(w.shape());
  out.w_hat = TensorF(w.shape());
  out.params.reserve(channels.size());
  Index loose = 0;

  for (Index c = 0; c < ch_count; ++c) {
    const ChannelScale& cs = channels[static_cast<std::size_t>(c)];
    if (!cs.frozen) raise(ErrorCode::Contract, "harden called before exponents were frozen");
    const double s = std::ldexp(1.0, cs.hard_exponent);
    for (Index i = c * per_ch; i < (c + 1) * per_ch; ++i) {
      const double h1 = rectified_sigmoid(state.u[i]);
      if (std::min(h1, 1.0 - h1) > 0.01) ++loose;
      const long long t = static_cast<long long>(std::floor(w[i] / s + cs.hard_zero));
      const int q = clip_code(t + static_cast<long long>(std::round(h1)), p);
      out.q_int[i] = q;
      out.w_hat[i] = static_cast<float>(s * (q - cs.hard_zero));
    }
    QuantParams qp = make_quant_params(bit_width, Granularity::PerChannel,
                                       Signedness::Asymmetric);
    qp.hardened = true;
    qp.exponent = cs.hard_exponent;
    qp.float_scale = s;
    qp.zero_point = cs.hard_zero;
    out.params.push_back(qp);
  }
  out.loose_fraction = static_cast<double>(loose) / static_cast<double>(w.numel());
  return out;
}

}  // namespace rapq
