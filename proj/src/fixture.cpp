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

#include "rapq/fixture.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "rapq/error.hpp"
#include "rapq/executor.hpp"
#include "rapq/nn.hpp"
#include "rapq/rng.hpp"

namespace rapq {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// One class prototype: a few low-frequency plane waves, normalized to zero
// mean and unit deviation so classes differ in pattern, not energy.
TensorF render_template(Rng& rng, Index hw) {
  TensorF t = TensorF::zeros({hw, hw});
  for (int k = 0; k < 3; ++k) {
    int fy = static_cast<int>(rng.uniform_int(3));
    int fx = static_cast<int>(rng.uniform_int(3));
    if (fy == 0 && fx == 0) fx = 1 + static_cast<int>(rng.uniform_int(2));
    if (rng.uniform01() < 0.5) fy = -fy;
    const double amp = rng.uniform(0.5, 1.0);
    const double phase = rng.uniform(0.0, kTwoPi);
    for (Index y = 0; y < hw; ++y)
      for (Index x = 0; x < hw; ++x)
        t[y * hw + x] += static_cast<float>(
            amp * std::sin(kTwoPi * (fy * static_cast<double>(y) +
                                     fx * static_cast<double>(x)) /
                               static_cast<double>(hw) +
                           phase));
  }
  const double mean = t.array().cast<double>().mean();
  t.array() -= static_cast<float>(mean);
  const double var = t.array().cast<double>().square().mean();
  t.array() /= static_cast<float>(std::sqrt(var) + 1e-12);
  return t;
}

// Smallest per-pixel RMS distance between a and any circular shift of b
// within the jitter range the sampler uses.
double min_shift_distance(const TensorF& a, const TensorF& b, Index hw) {
  double best = 1e30;
  for (Index dy = -2; dy <= 2; ++dy)
    for (Index dx = -2; dx <= 2; ++dx) {
      double acc = 0.0;
      for (Index y = 0; y < hw; ++y)
        for (Index x = 0; x < hw; ++x) {
          const Index sy = (y + dy + hw) % hw;
          const Index sx = (x + dx + hw) % hw;
          const double d = static_cast<double>(a[y * hw + x]) -
                           static_cast<double>(b[sy * hw + sx]);
          acc += d * d;
        }
      best = std::min(best, std::sqrt(acc / static_cast<double>(hw * hw)));
    }
  return best;
}

std::vector<TensorF> make_templates(Rng& rng, Index classes, Index hw) {
  std::vector<TensorF> out;
  for (Index c = 0; c < classes; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 1000)
        raise(ErrorCode::FixtureTraining,
              "could not draw a class template distinct from earlier ones");
      TensorF cand = render_template(rng, hw);
      double nearest = 1e30;
      for (const TensorF& prev : out)
        nearest = std::min(nearest, min_shift_distance(cand, prev, hw));
      if (nearest >= 0.7) {
        out.push_back(std::move(cand));
        break;
      }
    }
  }
  return out;
}

CalibrationSet synth_split(Rng& rng, const std::vector<TensorF>& templates,
                           Index count, Index hw, float sigma) {
  const Index classes = static_cast<Index>(templates.size());
  CalibrationSet set;
  set.labels.resize(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i)
    set.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % classes);
  rng.shuffle(set.labels);

  set.images = TensorF({count, 1, hw, hw});
  for (Index i = 0; i < count; ++i) {
    const TensorF& t = templates[static_cast<std::size_t>(set.labels[i])];
    const Index dy = static_cast<Index>(rng.uniform_int(5)) - 2;
    const Index dx = static_cast<Index>(rng.uniform_int(5)) - 2;
    const float amp = static_cast<float>(rng.uniform(0.7, 1.3));
    float* dst = set.images.data() + i * hw * hw;
    for (Index y = 0; y < hw; ++y)
      for (Index x = 0; x < hw; ++x) {
        const Index sy = (y + dy + hw) % hw;
        const Index sx = (x + dx + hw) % hw;
        dst[y * hw + x] = amp * t[sy * hw + sx] +
                          sigma * static_cast<float>(rng.normal());
      }
  }
  return set;
}

TensorF gather(const TensorF& images, const std::vector<Index>& idx,
               Index lo, Index n) {
  Shape s = images.shape();
  s[0] = n;
  TensorF out(s);
  const Index row = images.numel() / images.dim(0);
  for (Index i = 0; i < n; ++i)
    std::copy(images.data() + idx[static_cast<std::size_t>(lo + i)] * row,
              images.data() + (idx[static_cast<std::size_t>(lo + i)] + 1) * row,
              out.data() + i * row);
  return out;
}

struct Param {
  TensorF w;
  TensorF v;
  explicit Param(Shape shape) : w(TensorF::zeros(shape)), v(TensorF::zeros(shape)) {}
  void step(const TensorF& g, float lr, float mom) {
    v.array() = mom * v.array() + g.array();
    w.array() -= lr * v.array();
  }
};

struct BnParam {
  ArrayXf gamma, beta, vg, vb;
  ArrayXf running_mean, running_var;
  explicit BnParam(Index ch)
      : gamma(ArrayXf::Ones(ch)),
        beta(ArrayXf::Zero(ch)),
        vg(ArrayXf::Zero(ch)),
        vb(ArrayXf::Zero(ch)),
        running_mean(ArrayXf::Zero(ch)),
        running_var(ArrayXf::Ones(ch)) {}
  void step(const ArrayXf& gg, const ArrayXf& gb, float lr, float mom) {
    vg = mom * vg + gg;
    vb = mom * vb + gb;
    gamma -= lr * vg;
    beta -= lr * vb;
  }
  void track(const BNTrainCache& cache, float eps) {
    const ArrayXf var = cache.inv_std.square().inverse() - eps;
    running_mean = 0.9f * running_mean + 0.1f * cache.mean;
    running_var = 0.9f * running_var + 0.1f * var;
  }
};

TensorF he_init(Rng& rng, Shape shape, Index fan_in) {
  TensorF t(shape);
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(rng.normal() * std_dev);
  return t;
}

TensorF to_tensor(const ArrayXf& a) {
  TensorF t({static_cast<Index>(a.size())});
  for (Index i = 0; i < t.numel(); ++i) t[i] = a[i];
  return t;
}

}  // namespace

Fixture generate_fixture(const FixtureConfig& cfg) {
  if (cfg.batch <= 0 || cfg.train_count < cfg.batch)
    raise(ErrorCode::InvalidArgument, "fixture train split smaller than one batch");
  Rng rng(cfg.seed);

  const Index hw = cfg.image_hw;
  const Index ch = cfg.channels;
  const std::vector<TensorF> templates = make_templates(rng, cfg.classes, hw);

  Fixture fx;
  fx.train = synth_split(rng, templates, cfg.train_count, hw, cfg.noise_sigma);
  fx.calib = synth_split(rng, templates, cfg.calib_count, hw, cfg.noise_sigma);
  fx.test = synth_split(rng, templates, cfg.test_count, hw, cfg.noise_sigma);

  const Index half = hw / 2;
  const Index flat = ch * half * half;

  Param c1w(Shape{ch, 1, 3, 3}), c1b(Shape{ch});
  Param c2w(Shape{ch, ch, 3, 3}), c2b(Shape{ch});
  Param c3w(Shape{ch, ch, 3, 3}), c3b(Shape{ch});
  Param fcw(Shape{cfg.classes, flat}), fcb(Shape{cfg.classes});
  c1w.w = he_init(rng, c1w.w.shape(), 9);
  c2w.w = he_init(rng, c2w.w.shape(), ch * 9);
  c3w.w = he_init(rng, c3w.w.shape(), ch * 9);
  fcw.w = he_init(rng, fcw.w.shape(), flat);
  BnParam b1(ch), b2(ch), b3(ch);
  const float eps = 1e-5f;

  std::vector<Index> order(static_cast<std::size_t>(cfg.train_count));
  for (Index i = 0; i < cfg.train_count; ++i) order[static_cast<std::size_t>(i)] = i;

  const Index steps_per_epoch = cfg.train_count / cfg.batch;
  const Index total_steps = cfg.epochs * steps_per_epoch;
  Index step = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (Index it = 0; it < steps_per_epoch; ++it, ++step) {
      const float lr = cfg.lr * 0.5f *
                       (1.0f + static_cast<float>(std::cos(
                                   kTwoPi / 2.0 * static_cast<double>(step) /
                                   static_cast<double>(total_steps))));
      const TensorF x0 = gather(fx.train.images, order, it * cfg.batch, cfg.batch);
      std::vector<int> labels(static_cast<std::size_t>(cfg.batch));
      for (Index i = 0; i < cfg.batch; ++i)
        labels[static_cast<std::size_t>(i)] =
            fx.train.labels[static_cast<std::size_t>(
                order[static_cast<std::size_t>(it * cfg.batch + i)])];

      BNTrainCache cache1, cache2, cache3;
      const TensorF z1 = conv2d_forward(x0, c1w.w, c1b.w, 2, 1);
      const TensorF n1 = bn_forward_train(z1, b1.gamma, b1.beta, eps, cache1);
      const TensorF a1 = relu(n1);
      const TensorF z2 = conv2d_forward(a1, c2w.w, c2b.w, 1, 1);
      const TensorF n2 = bn_forward_train(z2, b2.gamma, b2.beta, eps, cache2);
      const TensorF a2 = relu(n2);
      const TensorF z3 = conv2d_forward(a2, c3w.w, c3b.w, 1, 1);
      const TensorF n3 = bn_forward_train(z3, b3.gamma, b3.beta, eps, cache3);
      TensorF sum = n3;
      sum.array() += a1.array();
      const TensorF a3 = relu(sum);
      const TensorF flat_x = a3.reshaped({cfg.batch, flat});
      const TensorF logits = linear_forward(flat_x, fcw.w, fcb.w);

      const SoftmaxXent xent = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(xent.loss))
        raise(ErrorCode::Divergence, "fixture training loss became non-finite");

      const LinearGrads gfc = linear_grad(flat_x, fcw.w, xent.grad_logits);
      const TensorF g_a3 = gfc.input.reshaped({cfg.batch, ch, half, half});
      const TensorF g_sum = relu_grad(sum, g_a3);
      const BNGrads g_bn3 = bn_backward(g_sum, b3.gamma, cache3);
      const Conv2dGrads g_c3 = conv2d_grad(a2, c3w.w, g_bn3.input, 1, 1);
      const TensorF g_n2 = relu_grad(n2, g_c3.input);
      const BNGrads g_bn2 = bn_backward(g_n2, b2.gamma, cache2);
      const Conv2dGrads g_c2 = conv2d_grad(a1, c2w.w, g_bn2.input, 1, 1);
      TensorF g_a1 = g_c2.input;
      g_a1.array() += g_sum.array();  // the skip path reuses a1 directly
      const TensorF g_n1 = relu_grad(n1, g_a1);
      const BNGrads g_bn1 = bn_backward(g_n1, b1.gamma, cache1);
      const Conv2dGrads g_c1 = conv2d_grad(x0, c1w.w, g_bn1.input, 2, 1);

      c1w.step(g_c1.weight, lr, cfg.momentum);
      c1b.step(g_c1.bias, lr, cfg.momentum);
      c2w.step(g_c2.weight, lr, cfg.momentum);
      c2b.step(g_c2.bias, lr, cfg.momentum);
      c3w.step(g_c3.weight, lr, cfg.momentum);
      c3b.step(g_c3.bias, lr, cfg.momentum);
      fcw.step(gfc.weight, lr, cfg.momentum);
      fcb.step(gfc.bias, lr, cfg.momentum);
      b1.step(g_bn1.gamma, g_bn1.beta, lr, cfg.momentum);
      b2.step(g_bn2.gamma, g_bn2.beta, lr, cfg.momentum);
      b3.step(g_bn3.gamma, g_bn3.beta, lr, cfg.momentum);
      b1.track(cache1, eps);
      b2.track(cache2, eps);
      b3.track(cache3, eps);
    }
  }

  Model m;
  m.graph.input_shape = {1, hw, hw};
  m.graph.output = "fc";
  m.graph.nodes = {
      GraphNode{.id = "c1", .kind = "conv2d", .inputs = {"input"}, .stride = 2, .pad = 1,
                .weight = "c1.w", .bias = "c1.b"},
      GraphNode{.id = "b1", .kind = "bn", .inputs = {"c1"}, .gamma = "b1.g",
                .beta = "b1.b", .mean = "b1.m", .var = "b1.v", .epsilon = eps},
      GraphNode{.id = "r1", .kind = "relu", .inputs = {"b1"}},
      GraphNode{.id = "c2", .kind = "conv2d", .inputs = {"r1"}, .stride = 1, .pad = 1,
                .weight = "c2.w", .bias = "c2.b"},
      GraphNode{.id = "b2", .kind = "bn", .inputs = {"c2"}, .gamma = "b2.g",
                .beta = "b2.b", .mean = "b2.m", .var = "b2.v", .epsilon = eps},
      GraphNode{.id = "r2", .kind = "relu", .inputs = {"b2"}},
      GraphNode{.id = "c3", .kind = "conv2d", .inputs = {"r2"}, .stride = 1, .pad = 1,
                .weight = "c3.w", .bias = "c3.b"},
      GraphNode{.id = "b3", .kind = "bn", .inputs = {"c3"}, .gamma = "b3.g",
                .beta = "b3.b", .mean = "b3.m", .var = "b3.v", .epsilon = eps},
      GraphNode{.id = "a1", .kind = "add", .inputs = {"b3", "r1"}},
      GraphNode{.id = "r3", .kind = "relu", .inputs = {"a1"}},
      GraphNode{.id = "f1", .kind = "flatten", .inputs = {"r3"}},
      GraphNode{.id = "fc", .kind = "linear", .inputs = {"f1"}, .weight = "fc.w",
                .bias = "fc.b"},
  };
  m.weights.put_f32("c1.w", c1w.w);
  m.weights.put_f32("c1.b", c1b.w);
  m.weights.put_f32("b1.g", to_tensor(b1.gamma));
  m.weights.put_f32("b1.b", to_tensor(b1.beta));
  m.weights.put_f32("b1.m", to_tensor(b1.running_mean));
  m.weights.put_f32("b1.v", to_tensor(b1.running_var));
  m.weights.put_f32("c2.w", c2w.w);
  m.weights.put_f32("c2.b", c2b.w);
  m.weights.put_f32("b2.g", to_tensor(b2.gamma));
  m.weights.put_f32("b2.b", to_tensor(b2.beta));
  m.weights.put_f32("b2.m", to_tensor(b2.running_mean));
  m.weights.put_f32("b2.v", to_tensor(b2.running_var));
  m.weights.put_f32("c3.w", c3w.w);
  m.weights.put_f32("c3.b", c3b.w);
  m.weights.put_f32("b3.g", to_tensor(b3.gamma));
  m.weights.put_f32("b3.b", to_tensor(b3.beta));
  m.weights.put_f32("b3.m", to_tensor(b3.running_mean));
  m.weights.put_f32("b3.v", to_tensor(b3.running_var));
  m.weights.put_f32("fc.w", fcw.w);
  m.weights.put_f32("fc.b", fcb.w);
  m.graph.validate(&m.weights);
  fx.model = std::move(m);

  fx.test_accuracy =
      eval_accuracy(fx.model, fx.test.images, fx.test.labels);
  if (fx.test_accuracy < cfg.accuracy_gate)
    raise(ErrorCode::FixtureTraining,
          "held-out accuracy " + std::to_string(fx.test_accuracy) +
              " below the gate " + std::to_string(cfg.accuracy_gate));
  return fx;
}

void save_fixture(const Fixture& fx, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_model(fx.model, dir + "/model.json", dir + "/model.rapq");
  save_calibration(fx.train, dir + "/train.rapq");
  save_calibration(fx.calib, dir + "/calib.rapq");
  save_calibration(fx.test, dir + "/test.rapq");
}

}  // namespace rapq
