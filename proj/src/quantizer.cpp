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

#include "rapq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rapq/error.hpp"

namespace rapq {

void QuantParams::validate() const {
  if (bit_width < 2) raise(ErrorCode::InvalidArgument, "bit_width must be >= 2");
  if (range_lo >= range_hi) raise(ErrorCode::InvalidArgument, "quantizer range is empty");
  if (signedness == Signedness::AsymmetricUnsigned &&
      (range_lo != 0 || range_hi != (1 << bit_width) - 1))
    raise(ErrorCode::InvalidArgument, "asymmetric-unsigned range must be [0, 2^b - 1]");
  if (zero_point < range_lo || zero_point > range_hi)
    raise(ErrorCode::InvalidArgument, "zero_point outside quantizer range");
  if (!hardened && !(float_scale > 0.0))
    raise(ErrorCode::InvalidArgument, "float_scale must be positive");
}

QuantParams make_quant_params(int bit_width, Granularity granularity, Signedness signedness) {
  QuantParams q;
  q.bit_width = bit_width;
  q.range_lo = 0;
  q.range_hi = (1 << bit_width) - 1;
  q.granularity = granularity;
  q.signedness = signedness;
  return q;
}

namespace {

inline int clip_int(long long v, int lo, int hi) {
  return static_cast<int>(std::clamp<long long>(v, lo, hi));
}

inline void quantize_range(const float* x, float* x_hat, std::int32_t* q_int, Index count,
                           const QuantParams& q) {
  const double s = q.scale();
  const double z = q.zero_point;
  for (Index i = 0; i < count; ++i) {
    const long long r = static_cast<long long>(std::round(x[i] / s + z));
    const int code = clip_int(r, q.range_lo, q.range_hi);
    q_int[i] = code;
    x_hat[i] = static_cast<float>(s * (code - z));
  }
}

}  // namespace

QuantizeResult quantize_affine(const TensorF& x, const QuantParams& q) {
  q.validate();
  x.require_finite("quantize_affine input");
  QuantizeResult r{TensorF(x.shape()), TensorI(x.shape())};
  quantize_range(x.data(), r.x_hat.data(), r.q_int.data(), x.numel(), q);
  return r;
}

QuantizeResult quantize_affine_channels(const TensorF& x, const std::vector<QuantParams>& qs) {
  x.require_finite("quantize_affine input");
  const Index channels = x.dim(0);
  if (static_cast<Index>(qs.size()) != channels)
    raise(ErrorCode::ShapeMismatch, "per-channel quantize: " + std::to_string(qs.size()) +
                                        " quantizers for " + std::to_string(channels) +
                                        " channels");
  const Index per_ch = x.numel() / channels;
  QuantizeResult r{TensorF(x.shape()), TensorI(x.shape())};
  for (Index c = 0; c < channels; ++c) {
    qs[static_cast<std::size_t>(c)].validate();
    quantize_range(x.data() + c * per_ch, r.x_hat.data() + c * per_ch,
                   r.q_int.data() + c * per_ch, per_ch, qs[static_cast<std::size_t>(c)]);
  }
  return r;
}

int naive_pow2_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s))
    raise(ErrorCode::InvalidArgument, "naive_pow2_scale requires s > 0");
  // nearbyint under the default FP environment rounds ties to even.
  return static_cast<int>(std::nearbyint(std::log2(s)));
}

int update_zero_point(double x_min, int exponent, const QuantParams& q) {
  const double s = std::ldexp(1.0, exponent);
  const long long r = static_cast<long long>(std::round(-x_min / s));
  return clip_int(r, q.range_lo, q.range_hi);
}

QuantParams init_scale_mse(const float* data, Index count, int bit_width,
                           Signedness signedness) {
  if (count <= 0) raise(ErrorCode::InvalidArgument, "init_scale_mse: empty sample set");
  QuantParams q = make_quant_params(bit_width, Granularity::PerTensor, signedness);
  const int levels = q.range_hi - q.range_lo;

  float lo = data[0], hi = data[0];
  for (Index i = 1; i < count; ++i) {
    lo = std::min(lo, data[i]);
    hi = std::max(hi, data[i]);
  }
  if (!std::isfinite(lo) || !std::isfinite(hi))
    raise(ErrorCode::NonFinite, "init_scale_mse: non-finite samples");

  if (hi == lo) {
    // Constant data. Anchor the range at zero so a nonzero constant is still
    // representable; all-zero data keeps the scale floor.
    lo = std::min(lo, 0.0f);
    hi = std::max(hi, 0.0f);
    if (hi == lo) {
      q.float_scale = kScaleFloor;
      q.zero_point = 0;
      return q;
    }
  }

  double best_err = std::numeric_limits<double>::infinity();
  double best_s = kScaleFloor;
  int best_z = 0;
  for (int gi = 0; gi < 100; ++gi) {
    const double f = 0.5 + 0.5 * gi / 99.0;
    const double cand_lo = f * lo;
    const double cand_hi = f * hi;
    double s = (cand_hi - cand_lo) / levels;
    if (!(s > 0.0)) s = kScaleFloor;
    const int z = clip_int(static_cast<long long>(std::round(-cand_lo / s)), q.range_lo,
                           q.range_hi);
    double err = 0.0;
    for (Index i = 0; i < count; ++i) {
      const long long r = static_cast<long long>(std::round(data[i] / s + z));
      const int code = clip_int(r, q.range_lo, q.range_hi);
      const double d = data[i] - s * (code - z);
      err += d * d;
      if (err >= best_err) break;
    }
    if (err < best_err) {
      best_err = err;
      best_s = s;
      best_z = z;
    }
  }
  q.float_scale = std::max(best_s, kScaleFloor);
  q.zero_point = best_z;
  return q;
}

QuantParams init_scale_mse(const TensorF& samples, int bit_width, Signedness signedness) {
  return init_scale_mse(samples.data(), samples.numel(), bit_width, signedness);
}

std::vector<QuantParams> init_scale_mse_per_channel(const TensorF& weight, int bit_width) {
  const Index channels = weight.dim(0);
  const Index per_ch = weight.numel() / channels;
  std::vector<QuantParams> qs;
  qs.reserve(static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c) {
    QuantParams q =
        init_scale_mse(weight.data() + c * per_ch, per_ch, bit_width, Signedness::Asymmetric);
    q.granularity = Granularity::PerChannel;
    qs.push_back(q);
  }
  return qs;
}

ClipStats count_clip_round(const TensorF& x, const QuantParams& q) {
  q.validate();
  const double s = q.scale();
  const double z = q.zero_point;
  ClipStats stats;
  for (Index i = 0; i < x.numel(); ++i) {
    const double r = std::round(x[i] / s + z);
    if (r < q.range_lo || r > q.range_hi) {
      ++stats.clipped;
    } else {
      stats.max_round_err = std::max(stats.max_round_err, std::abs(x[i] - s * (r - z)));
    }
  }
  return stats;
}

}  // namespace rapq
