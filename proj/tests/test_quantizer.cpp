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

#include <cmath>

#include "doctest.h"
#include "rapq/error.hpp"
#include "rapq/rng.hpp"

using namespace rapq;

namespace {

QuantParams params_with(double s, int z, int b) {
  QuantParams q = make_quant_params(b, Granularity::PerTensor, Signedness::AsymmetricUnsigned);
  q.float_scale = s;
  q.zero_point = z;
  return q;
}

}  // namespace

TEST_CASE("quantize_affine worked scalar cases") {
  QuantParams q = params_with(0.25, 0, 4);
  QuantizeResult r = quantize_affine(TensorF::from_values({1}, {0.3f}), q);
  CHECK(r.q_int[0] == 1);  // round(1.2) = 1
  CHECK(r.x_hat[0] == doctest::Approx(0.25));

  r = quantize_affine(TensorF::from_values({1}, {100.0f}), q);
  CHECK(r.q_int[0] == 15);  // clipped at p
  CHECK(r.x_hat[0] == doctest::Approx(3.75));

  // half-away-from-zero at the tie
  r = quantize_affine(TensorF::from_values({2}, {0.125f, 0.375f}), q);
  CHECK(r.q_int[0] == 1);
  CHECK(r.q_int[1] == 2);
}

TEST_CASE("quantize_affine validates params and input") {
  QuantParams q = params_with(0.0, 0, 4);
  CHECK_THROWS_AS(quantize_affine(TensorF::zeros({1}), q), Error);
  q = params_with(0.25, 99, 4);
  CHECK_THROWS_AS(quantize_affine(TensorF::zeros({1}), q), Error);
  q = params_with(0.25, 0, 1);
  CHECK_THROWS_AS(quantize_affine(TensorF::zeros({1}), q), Error);
}

TEST_CASE("quantize_affine property: idempotence (1000 cases)") {
  Rng rng(101);
  for (int t = 0; t < 1000; ++t) {
    const int b = 2 + static_cast<int>(rng.uniform_int(7));
    QuantParams q = params_with(std::exp2(rng.uniform(-8.0, 2.0)),
                                static_cast<int>(rng.uniform_int(1u << b)), b);
    TensorF x({8});
    for (Index i = 0; i < 8; ++i) x[i] = static_cast<float>(rng.normal() * 2.0);
    QuantizeResult first = quantize_affine(x, q);
    QuantizeResult second = quantize_affine(first.x_hat, q);
    for (Index i = 0; i < 8; ++i) {
      REQUIRE(second.q_int[i] == first.q_int[i]);
      REQUIRE(second.x_hat[i] == first.x_hat[i]);  // bit-exact fixed point
    }
  }
}

TEST_CASE("quantize_affine property: monotonicity (1000 cases)") {
  Rng rng(102);
  for (int t = 0; t < 1000; ++t) {
    const int b = 2 + static_cast<int>(rng.uniform_int(7));
    QuantParams q = params_with(rng.uniform(1e-3, 2.0),
                                static_cast<int>(rng.uniform_int(1u << b)), b);
    const float x = static_cast<float>(rng.normal() * 3.0);
    const float y = x + static_cast<float>(rng.uniform(0.0, 4.0));
    QuantizeResult rx = quantize_affine(TensorF::from_values({1}, {x}), q);
    QuantizeResult ry = quantize_affine(TensorF::from_values({1}, {y}), q);
    REQUIRE(rx.x_hat[0] <= ry.x_hat[0]);
  }
}

TEST_CASE("quantize_affine property: unclipped rounding bound s/2 (1000 cases)") {
  Rng rng(103);
  for (int t = 0; t < 1000; ++t) {
    const int b = 2 + static_cast<int>(rng.uniform_int(7));
    const double s = rng.uniform(1e-3, 1.0);
    QuantParams q = params_with(s, static_cast<int>(rng.uniform_int(1u << b)), b);
    TensorF x({4});
    for (Index i = 0; i < 4; ++i) x[i] = static_cast<float>(rng.normal());
    QuantizeResult r = quantize_affine(x, q);
    for (Index i = 0; i < 4; ++i) {
      if (r.q_int[i] == q.range_lo || r.q_int[i] == q.range_hi) continue;  // may be clipped
      REQUIRE(std::abs(x[i] - r.x_hat[i]) <= s / 2 + 1e-9);
    }
  }
}

TEST_CASE("naive_pow2_scale worked cases and ratio bound (1000 cases)") {
  CHECK(naive_pow2_scale(0.25) == -2);
  CHECK(naive_pow2_scale(0.3) == -2);   // log2 0.3 = -1.737
  CHECK(naive_pow2_scale(0.4) == -1);   // log2 0.4 = -1.322
  CHECK_THROWS_AS(naive_pow2_scale(0.0), Error);
  CHECK_THROWS_AS(naive_pow2_scale(-1.0), Error);

  Rng rng(104);
  for (int t = 0; t < 1000; ++t) {
    const double s = std::exp2(rng.uniform(-12.0, 6.0));
    const int e = naive_pow2_scale(s);
    const double ratio = std::ldexp(1.0, e) / s;
    REQUIRE(ratio >= std::exp2(-0.5) - 1e-12);
    REQUIRE(ratio <= std::exp2(0.5) + 1e-12);
    REQUIRE(std::abs(std::log2(s) - e) <= 0.5 + 1e-12);
  }
}

TEST_CASE("update_zero_point worked cases") {
  QuantParams q = make_quant_params(4, Granularity::PerTensor, Signedness::AsymmetricUnsigned);
  CHECK(update_zero_point(0.0, -2, q) == 0);
  CHECK(update_zero_point(-1.0, -2, q) == 4);
  CHECK(update_zero_point(-0.3, -2, q) == 1);  // round(1.2)
  CHECK(update_zero_point(-100.0, -2, q) == 15);  // clipped at p
}

TEST_CASE("init_scale_mse recovers a lossless grid") {
  const double s = 0.125;
  TensorF x({16});
  for (Index k = 0; k < 16; ++k) x[k] = static_cast<float>(s * k);
  QuantParams q = init_scale_mse(x, 4, Signedness::AsymmetricUnsigned);
  CHECK(q.float_scale == doctest::Approx(s).epsilon(1e-6));
  CHECK(q.zero_point == 0);
  QuantizeResult r = quantize_affine(x, q);
  for (Index k = 0; k < 16; ++k) CHECK(r.x_hat[k] == doctest::Approx(x[k]).epsilon(1e-6));
}

TEST_CASE("init_scale_mse degenerate constant data hits the scale floor") {
  TensorF zeros = TensorF::zeros({8});
  QuantParams q = init_scale_mse(zeros, 4, Signedness::AsymmetricUnsigned);
  CHECK(q.float_scale == doctest::Approx(kScaleFloor));
  CHECK(q.zero_point == 0);

  // nonzero constant still representable: range anchored at zero
  TensorF ones = TensorF::full({8}, 0.5f);
  q = init_scale_mse(ones, 4, Signedness::Asymmetric);
  QuantizeResult r = quantize_affine(ones, q);
  CHECK(r.x_hat[0] == doctest::Approx(0.5f).epsilon(1e-3));
}

TEST_CASE("init_scale_mse beats plain min-max scaling on gaussian data") {
  Rng rng(105);
  TensorF x({512});
  for (Index i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.normal());
  QuantParams q = init_scale_mse(x, 4, Signedness::AsymmetricUnsigned);

  float lo = x[0], hi = x[0];
  for (Index i = 1; i < x.numel(); ++i) {
    lo = std::min(lo, x[i]);
    hi = std::max(hi, x[i]);
  }
  QuantParams minmax = params_with((hi - lo) / 15.0, 0, 4);
  minmax.zero_point = static_cast<int>(std::round(-lo / minmax.float_scale));

  auto mse = [&](const QuantParams& p) {
    QuantizeResult r = quantize_affine(x, p);
    double err = 0.0;
    for (Index i = 0; i < x.numel(); ++i) {
      const double d = x[i] - r.x_hat[i];
      err += d * d;
    }
    return err;
  };
  CHECK(mse(q) <= mse(minmax) + 1e-9);
}

TEST_CASE("init_scale_mse per channel solves channels independently") {
  TensorF w({2, 4});
  for (Index i = 0; i < 4; ++i) w[i] = static_cast<float>(0.1 * i);
  for (Index i = 0; i < 4; ++i) w[4 + i] = static_cast<float>(10.0 * i);
  std::vector<QuantParams> qs = init_scale_mse_per_channel(w, 4);
  REQUIRE(qs.size() == 2);
  CHECK(qs[0].float_scale < qs[1].float_scale);
  CHECK(qs[0].granularity == Granularity::PerChannel);
}

TEST_CASE("count_clip_round counts and bounds") {
  QuantParams q = params_with(0.25, 0, 4);
  TensorF in_range({4});
  for (Index i = 0; i < 4; ++i) in_range[i] = static_cast<float>(0.2 * i);
  ClipStats stats = count_clip_round(in_range, q);
  CHECK(stats.clipped == 0);
  CHECK(stats.max_round_err <= 0.125 + 1e-9);

  TensorF wide = TensorF::from_values({3}, {-5.0f, 0.5f, 50.0f});
  stats = count_clip_round(wide, q);
  CHECK(stats.clipped == 2);
}

TEST_CASE("clip/round trade-off when the exponent moves (figure-2 behavior)") {
  Rng rng(106);
  for (int t = 0; t < 200; ++t) {
    TensorF x({64});
    for (Index i = 0; i < x.numel(); ++i)
      x[i] = static_cast<float>(std::abs(rng.normal()) * 0.7);
    const double s = rng.uniform(0.02, 0.4);
    const int lo_e = static_cast<int>(std::floor(std::log2(s)));
    QuantParams q_lo = params_with(std::ldexp(1.0, lo_e), 0, 4);
    QuantParams q_hi = params_with(std::ldexp(1.0, lo_e + 1), 0, 4);
    ClipStats c_lo = count_clip_round(x, q_lo);
    ClipStats c_hi = count_clip_round(x, q_hi);
    // smaller scale clips at least as much; larger scale rounds at least as
    // coarsely (bound doubles)
    REQUIRE(c_lo.clipped >= c_hi.clipped);
    REQUIRE(std::ldexp(1.0, lo_e) / 2 <= std::ldexp(1.0, lo_e + 1) / 2);
    if (c_lo.clipped == 0 && c_hi.clipped == 0)
      REQUIRE(c_lo.max_round_err <= std::ldexp(1.0, lo_e) / 2 + 1e-9);
  }
}

TEST_CASE("per-channel quantize applies each channel's params") {
  TensorF w({2, 2});
  w[0] = 0.3f;
  w[1] = 0.6f;
  w[2] = 3.0f;
  w[3] = 6.0f;
  std::vector<QuantParams> qs = {params_with(0.25, 0, 4), params_with(2.0, 0, 4)};
  qs[0].granularity = qs[1].granularity = Granularity::PerChannel;
  QuantizeResult r = quantize_affine_channels(w, qs);
  CHECK(r.q_int[0] == 1);
  CHECK(r.q_int[1] == 2);
  CHECK(r.q_int[2] == 2);  // 3.0 / 2.0 = 1.5 rounds away from zero
  CHECK(r.q_int[3] == 3);
}
