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

#include <cmath>

#include "doctest.h"
#include "rapq/error.hpp"
#include "rapq/finite_diff.hpp"
#include "rapq/rng.hpp"

using namespace rapq;

namespace {

TensorF random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorF t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.normal() * scale);
  return t;
}

// Projection loss sum(out * r) turns tensor gradients into plain vectors the
// finite-difference oracle can probe one coordinate at a time.
double projected(const TensorF& out, const TensorF& r) {
  double acc = 0.0;
  for (Index i = 0; i < out.numel(); ++i)
    acc += static_cast<double>(out[i]) * static_cast<double>(r[i]);
  return acc;
}

std::vector<double> to_vec(const TensorF& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

}  // namespace

TEST_CASE("finite differences recover known gradients") {
  auto sum_fn = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s;
  };
  std::vector<double> grad = finite_diff_grad(sum_fn, {0.3, -1.2, 4.0});
  for (double g : grad) CHECK(g == doctest::Approx(1.0).epsilon(1e-6));

  auto half_norm = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += 0.5 * v * v;
    return s;
  };
  grad = finite_diff_grad(half_norm, {0.3, -1.2, 4.0});
  CHECK(grad[0] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(grad[1] == doctest::Approx(-1.2).epsilon(1e-6));
  CHECK(grad[2] == doctest::Approx(4.0).epsilon(1e-6));

  CHECK_THROWS_AS(finite_diff_grad(sum_fn, {1.0}, 1.0), Error);
  auto bad = [](const std::vector<double>&) { return std::nan(""); };
  CHECK_THROWS_AS(finite_diff_grad(bad, {1.0}), Error);
}

TEST_CASE("conv2d identity kernel reproduces the input") {
  Rng rng(7);
  TensorF x = random_tensor({2, 3, 5, 5}, rng);
  TensorF w = TensorF::zeros({3, 3, 1, 1});
  for (Index o = 0; o < 3; ++o) w.at4(o, o, 0, 0) = 1.0f;
  TensorF b = TensorF::zeros({3});
  TensorF y = conv2d_forward(x, w, b, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (Index i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]));
}

TEST_CASE("conv2d hand-checked 2x2 valid case") {
  TensorF x = TensorF::from_values({1, 1, 2, 2}, {1, 0, 0, 1});
  TensorF w = TensorF::from_values({1, 1, 2, 2}, {2, 3, 4, 5});
  TensorF b = TensorF::from_values({1}, {0.5f});
  TensorF y = conv2d_forward(x, w, b, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(2 * 1 + 3 * 0 + 4 * 0 + 5 * 1 + 0.5));
}

TEST_CASE("conv2d stride and padding geometry") {
  TensorF x = TensorF::zeros({1, 1, 16, 16});
  TensorF w = TensorF::zeros({8, 1, 3, 3});
  TensorF b = TensorF::zeros({8});
  TensorF y = conv2d_forward(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{1, 8, 8, 8});
  CHECK_THROWS_AS(conv2d_forward(x, TensorF::zeros({8, 2, 3, 3}), b, 1, 0), Error);
  CHECK_THROWS_AS(conv2d_forward(x, w, b, 0, 0), Error);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(11);
  const struct {
    Shape in, w;
    Index stride, pad;
  } cases[] = {
      {{1, 1, 4, 4}, {2, 1, 3, 3}, 1, 1},
      {{2, 2, 5, 5}, {3, 2, 3, 3}, 2, 1},
      {{1, 3, 4, 4}, {2, 3, 2, 2}, 1, 0},
  };
  for (const auto& c : cases) {
    for (int inst = 0; inst < 4; ++inst) {
      TensorF x = random_tensor(c.in, rng);
      TensorF w = random_tensor(c.w, rng);
      TensorF b = random_tensor({c.w[0]}, rng);
      TensorF y = conv2d_forward(x, w, b, c.stride, c.pad);
      TensorF r = random_tensor(y.shape(), rng);

      Conv2dGrads grads = conv2d_grad(x, w, r, c.stride, c.pad);

      auto loss_w = [&](const std::vector<double>& v) {
        TensorF wp = w;
        for (Index i = 0; i < wp.numel(); ++i) wp[i] = static_cast<float>(v[i]);
        return projected(conv2d_forward(x, wp, b, c.stride, c.pad), r);
      };
      auto fd_w = finite_diff_grad(loss_w, to_vec(w), 1e-2);
      CHECK(max_relative_error(fd_w, to_vec(grads.weight)) < 1e-3);

      auto loss_x = [&](const std::vector<double>& v) {
        TensorF xp = x;
        for (Index i = 0; i < xp.numel(); ++i) xp[i] = static_cast<float>(v[i]);
        return projected(conv2d_forward(xp, w, b, c.stride, c.pad), r);
      };
      auto fd_x = finite_diff_grad(loss_x, to_vec(x), 1e-2);
      CHECK(max_relative_error(fd_x, to_vec(grads.input)) < 1e-3);

      auto loss_b = [&](const std::vector<double>& v) {
        TensorF bp = b;
        for (Index i = 0; i < bp.numel(); ++i) bp[i] = static_cast<float>(v[i]);
        return projected(conv2d_forward(x, w, bp, c.stride, c.pad), r);
      };
      auto fd_b = finite_diff_grad(loss_b, to_vec(b), 1e-2);
      CHECK(max_relative_error(fd_b, to_vec(grads.bias)) < 1e-3);
    }
  }
}

TEST_CASE("relu and its subgradient") {
  TensorF x = TensorF::from_values({4}, {-1.0f, 0.0f, 0.5f, 2.0f});
  TensorF y = relu(x);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == 0.5f);
  TensorF g = TensorF::full({4}, 1.0f);
  TensorF gx = relu_grad(x, g);
  CHECK(gx[0] == 0.0f);
  CHECK(gx[1] == 0.0f);  // subgradient 0 at the kink
  CHECK(gx[2] == 1.0f);
  CHECK(gx[3] == 1.0f);
}

TEST_CASE("linear forward and gradients") {
  Rng rng(13);
  TensorF x = random_tensor({3, 5}, rng);
  TensorF w = random_tensor({4, 5}, rng);
  TensorF b = random_tensor({4}, rng);
  TensorF y = linear_forward(x, w, b);
  REQUIRE(y.shape() == Shape{3, 4});
  // row 0, output 0 by hand
  double acc = b[0];
  for (Index f = 0; f < 5; ++f) acc += static_cast<double>(x[f]) * w[f];
  CHECK(y[0] == doctest::Approx(acc).epsilon(1e-5));

  TensorF r = random_tensor(y.shape(), rng);
  LinearGrads grads = linear_grad(x, w, r);
  auto loss_w = [&](const std::vector<double>& v) {
    TensorF wp = w;
    for (Index i = 0; i < wp.numel(); ++i) wp[i] = static_cast<float>(v[i]);
    return projected(linear_forward(x, wp, b), r);
  };
  CHECK(max_relative_error(finite_diff_grad(loss_w, to_vec(w), 1e-2), to_vec(grads.weight)) <
        1e-3);
  auto loss_x = [&](const std::vector<double>& v) {
    TensorF xp = x;
    for (Index i = 0; i < xp.numel(); ++i) xp[i] = static_cast<float>(v[i]);
    return projected(linear_forward(xp, w, b), r);
  };
  CHECK(max_relative_error(finite_diff_grad(loss_x, to_vec(x), 1e-2), to_vec(grads.input)) <
        1e-3);
}

TEST_CASE("bn fold: identity parameters leave conv unchanged") {
  Rng rng(17);
  TensorF w = random_tensor({3, 2, 3, 3}, rng);
  TensorF b = random_tensor({3}, rng);
  TensorF w0 = w, b0 = b;
  BNParams bn;
  bn.gamma = ArrayXf::Ones(3);
  bn.beta = ArrayXf::Zero(3);
  bn.running_mean = ArrayXf::Zero(3);
  bn.running_var = ArrayXf::Ones(3);
  bn.epsilon = 0.0f;
  fold_bn(w, b, bn);
  for (Index i = 0; i < w.numel(); ++i) CHECK(w[i] == doctest::Approx(w0[i]));
  for (Index i = 0; i < b.numel(); ++i) CHECK(b[i] == doctest::Approx(b0[i]));
}

TEST_CASE("bn fold equals bn applied after conv") {
  Rng rng(19);
  TensorF x = random_tensor({2, 2, 6, 6}, rng);
  TensorF w = random_tensor({3, 2, 3, 3}, rng);
  TensorF b = random_tensor({3}, rng);
  BNParams bn;
  bn.gamma = ArrayXf::Random(3) + 1.5f;
  bn.beta = ArrayXf::Random(3);
  bn.running_mean = ArrayXf::Random(3);
  bn.running_var = ArrayXf::Random(3).abs() + 0.5f;
  bn.epsilon = 1e-5f;

  TensorF reference = bn_forward_infer(conv2d_forward(x, w, b, 1, 1), bn);
  fold_bn(w, b, bn);
  TensorF folded = conv2d_forward(x, w, b, 1, 1);
  for (Index i = 0; i < folded.numel(); ++i)
    CHECK(folded[i] == doctest::Approx(reference[i]).epsilon(1e-4));

  BNParams bad = bn;
  bad.running_var[0] = -1.0f;
  CHECK_THROWS_AS(fold_bn(w, b, bad), Error);
}

TEST_CASE("bn training backward matches finite differences") {
  Rng rng(23);
  TensorF x = random_tensor({4, 2, 3, 3}, rng);
  ArrayXf gamma = ArrayXf::Random(2) + 1.5f;
  ArrayXf beta = ArrayXf::Random(2);
  const float eps = 1e-5f;
  BNTrainCache cache;
  TensorF y = bn_forward_train(x, gamma, beta, eps, cache);
  TensorF r = random_tensor(y.shape(), rng);
  BNGrads grads = bn_backward(r, gamma, cache);

  auto loss_x = [&](const std::vector<double>& v) {
    TensorF xp = x;
    for (Index i = 0; i < xp.numel(); ++i) xp[i] = static_cast<float>(v[i]);
    BNTrainCache c;
    return projected(bn_forward_train(xp, gamma, beta, eps, c), r);
  };
  CHECK(max_relative_error(finite_diff_grad(loss_x, to_vec(x), 1e-3), to_vec(grads.input)) <
        2e-3);

  auto loss_g = [&](const std::vector<double>& v) {
    ArrayXf gp = gamma;
    for (Index i = 0; i < gp.size(); ++i) gp[i] = static_cast<float>(v[i]);
    BNTrainCache c;
    return projected(bn_forward_train(x, gp, beta, eps, c), r);
  };
  std::vector<double> gvec(gamma.data(), gamma.data() + gamma.size());
  std::vector<double> fd_g = finite_diff_grad(loss_g, gvec, 1e-3);
  std::vector<double> an_g(grads.gamma.data(), grads.gamma.data() + grads.gamma.size());
  CHECK(max_relative_error(fd_g, an_g) < 2e-3);
}

TEST_CASE("softmax cross entropy value and gradient") {
  TensorF logits = TensorF::from_values({1, 3}, {0.0f, 0.0f, 0.0f});
  SoftmaxXent sx = softmax_cross_entropy(logits, {1});
  CHECK(sx.loss == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  Rng rng(29);
  TensorF l2({4, 5});
  for (Index i = 0; i < l2.numel(); ++i) l2[i] = static_cast<float>(rng.normal());
  std::vector<int> labels = {0, 3, 2, 4};
  SoftmaxXent sx2 = softmax_cross_entropy(l2, labels);
  auto loss_fn = [&](const std::vector<double>& v) {
    TensorF lp = l2;
    for (Index i = 0; i < lp.numel(); ++i) lp[i] = static_cast<float>(v[i]);
    return static_cast<double>(softmax_cross_entropy(lp, labels).loss);
  };
  CHECK(max_relative_error(finite_diff_grad(loss_fn, to_vec(l2), 1e-3),
                           to_vec(sx2.grad_logits)) < 2e-3);

  CHECK_THROWS_AS(softmax_cross_entropy(l2, {0, 1}), Error);
  CHECK_THROWS_AS(softmax_cross_entropy(l2, {0, 1, 2, 9}), Error);
}

TEST_CASE("conv2d forward and grad are deterministic across repeats") {
  Rng rng(31);
  TensorF x = random_tensor({2, 3, 8, 8}, rng);
  TensorF w = random_tensor({4, 3, 3, 3}, rng);
  TensorF b = random_tensor({4}, rng);
  TensorF y1 = conv2d_forward(x, w, b, 1, 1);
  TensorF y2 = conv2d_forward(x, w, b, 1, 1);
  for (Index i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}
