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

#include "rapq/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rapq/adam.hpp"
#include "rapq/error.hpp"
#include "rapq/quantizer.hpp"
#include "rapq/softquant.hpp"
#include "rapq/unit_runner.hpp"

namespace rapq {

double lp_loss(const TensorF& a, const TensorF& b, double p) {
  require_same_shape(a, b, "lp_loss");
  if (!(p >= 1.0 && p <= 2.0))
    raise(ErrorCode::InvalidArgument, "lp_loss: exponent must lie in [1, 2]");
  if (a.ndim() < 1 || a.dim(0) == 0) raise(ErrorCode::InvalidArgument, "lp_loss: empty batch");
  const TensorF::Array d = (a.array() - b.array()).abs();
  double sum;
  if (p == 2.0)
    sum = d.square().cast<double>().sum();
  else if (p == 1.0)
    sum = d.cast<double>().sum();
  else
    sum = d.pow(static_cast<float>(p)).cast<double>().sum();
  return sum / static_cast<double>(a.dim(0));
}

TensorF lp_loss_grad(const TensorF& a, const TensorF& b, double p) {
  require_same_shape(a, b, "lp_loss_grad");
  if (!(p >= 1.0 && p <= 2.0))
    raise(ErrorCode::InvalidArgument, "lp_loss_grad: exponent must lie in [1, 2]");
  if (a.ndim() < 1 || a.dim(0) == 0) raise(ErrorCode::InvalidArgument, "lp_loss_grad: empty batch");
  const float inv_n = 1.0f / static_cast<float>(a.dim(0));
  TensorF g(a.shape());
  if (p == 2.0) {
    g.array() = (a.array() - b.array()) * (2.0f * inv_n);
    return g;
  }
  const TensorF::Array d = a.array() - b.array();
  const TensorF::Array mag = d.abs().pow(static_cast<float>(p) - 1.0f) *
                             (static_cast<float>(p) * inv_n);
  const TensorF::Array zero = TensorF::Array::Zero(d.size());
  g.array() = (d > 0.0f).select(mag, (d < 0.0f).select(-mag, zero));
  return g;
}

namespace {

struct LayerCtx {
  const GraphNode* node = nullptr;
  TensorF weight, bias;
  std::vector<QuantParams> init_params;
  std::vector<ChannelScale> channels;
  SoftQuantState soft;
  AdamState adam_u{0, 0.0};
  AdamState adam_v{0, 0.0};
  SoftWeightEval eval;
};

struct NaiveLayer {
  std::vector<QuantParams> params;
  TensorI codes;
  TensorF dequant;
};

// Nearest power-of-two exponent, rescaled zero-point, nearest rounding.
NaiveLayer naive_layer(const TensorF& w, const std::vector<QuantParams>& init, int bits) {
  const Index out_ch = w.dim(0);
  const Index per = w.numel() / out_ch;
  const double top = static_cast<double>((1 << bits) - 1);
  NaiveLayer out;
  out.codes = TensorI(w.shape());
  out.dequant = TensorF(w.shape());
  for (Index c = 0; c < out_ch; ++c) {
    QuantParams q = init[static_cast<std::size_t>(c)];
    const double s = q.float_scale;
    const int e = naive_pow2_scale(s);
    const double s2 = std::ldexp(1.0, e);
    const int z = static_cast<int>(
        std::clamp(std::round(s * q.zero_point / s2), 0.0, top));
    for (Index i = 0; i < per; ++i) {
      const Index at = c * per + i;
      const double code = std::clamp(std::round(static_cast<double>(w[at]) / s2 + z), 0.0, top);
      out.codes[at] = static_cast<std::int32_t>(code);
      out.dequant[at] = static_cast<float>(s2 * (code - z));
    }
    q.hardened = true;
    q.exponent = e;
    q.float_scale = s2;
    q.zero_point = z;
    out.params.push_back(q);
  }
  return out;
}

double unit_pool_loss(const UnitRunner& runner,
                      const std::map<std::string, const TensorF*>& weights,
                      const std::map<std::string, const TensorF*>& biases,
                      const std::map<std::string, TensorF>& boundary, const TensorF& target,
                      double p, Index chunk = 256) {
  const Index n = target.dim(0);
  double acc = 0.0;
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    std::vector<Index> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    std::map<std::string, TensorF> bnd;
    for (const auto& [id, pool] : boundary) bnd.emplace(id, gather_batch(pool, idx));
    UnitTape tape;
    const TensorF out = runner.forward(weights, biases, bnd, tape);
    acc += lp_loss(out, gather_batch(target, idx), p) * static_cast<double>(count);
  }
  return acc / static_cast<double>(n);
}

}  // namespace

UnitResult optimize_unit(const Model& folded, const BlockUnit& unit,
                         const std::map<std::string, TensorF>& boundary, const TensorF& target,
                         const ReconstructConfig& cfg, Rng& rng) {
  UnitRunner runner(folded.graph, unit);
  const double P = unit.p_value;
  const Index pool_n = target.dim(0);
  if (pool_n < cfg.batch)
    raise(ErrorCode::InvalidArgument, "optimize_unit: calibration pool smaller than batch");

  std::map<std::string, LayerCtx> layers;
  for (const std::string& lid : unit.layer_ids) {
    LayerCtx ctx;
    ctx.node = &folded.graph.node(lid);
    ctx.weight = folded.weights.f32(ctx.node->weight);
    ctx.bias = folded.weights.f32(ctx.node->bias);
    ctx.init_params = init_scale_mse_per_channel(ctx.weight, cfg.weight_bits);
    ctx.channels = make_channel_scales(ctx.init_params);
    ctx.soft.mu = cfg.mu;
    ctx.soft.lambda = cfg.lambda;
    init_v(ctx.channels, ctx.soft);
    init_u(ctx.weight, ctx.channels, ctx.soft, cfg.weight_bits);
    ctx.adam_v = AdamState(ctx.channels.size(), cfg.lr_v);
    ctx.adam_u = AdamState(static_cast<std::size_t>(ctx.weight.numel()), cfg.lr_u);
    layers.emplace(lid, std::move(ctx));
  }

  UnitReport rep;
  rep.unit_id = unit.id;
  rep.p_value = P;
  rep.events.push_back("init_scales");

  auto eval_soft = [&]() {
    for (auto& [lid, ctx] : layers)
      ctx.eval = soft_weight(ctx.weight, ctx.channels, ctx.soft, cfg.weight_bits);
  };
  std::map<std::string, const TensorF*> weights, biases;
  for (auto& [lid, ctx] : layers) {
    weights.emplace(lid, &ctx.eval.w_tilde);
    biases.emplace(lid, &ctx.bias);
  }

  eval_soft();
  rep.loss_init = unit_pool_loss(runner, weights, biases, boundary, target, P);

  auto run_phase = [&](bool train_v, Index iters, Index& consumed) {
    for (Index it = 0; it < iters; ++it) {
      const double beta = anneal_schedule(it, iters, cfg.warm_frac);
      const std::vector<Index> idx = sample_indices(pool_n, cfg.batch, rng);
      std::map<std::string, TensorF> bnd;
      for (const auto& [bid, pool] : boundary) bnd.emplace(bid, gather_batch(pool, idx));
      const TensorF tgt = gather_batch(target, idx);
      eval_soft();
      UnitTape tape;
      const TensorF out = runner.forward(weights, biases, bnd, tape);
      const double loss = lp_loss(out, tgt, P);
      if (!std::isfinite(loss))
        raise(ErrorCode::Divergence, "unit " + unit.id + ": non-finite loss at iteration " +
                                         std::to_string(it));
      UnitRunner::Grads grads =
          runner.backward(lp_loss_grad(out, tgt, P), weights, bnd, tape, false);
      for (auto& [lid, ctx] : layers) {
        ctx.soft.beta_anneal = beta;
        TensorF grad_u = TensorF::zeros(ctx.soft.u.shape());
        std::vector<double> grad_v(ctx.channels.size(), 0.0);
        soft_weight_backward(ctx.eval, grads.weight.at(lid), ctx.channels, train_v, grad_u,
                             grad_v);
        if (train_v) {
          const TensorF reg = regularizer_grad(ctx.soft.v, beta);
          for (std::size_t c = 0; c < grad_v.size(); ++c)
            grad_v[c] += cfg.mu * static_cast<double>(reg[static_cast<Index>(c)]);
          ctx.adam_v.step(ctx.soft.v.data(), grad_v.data(), grad_v.size());
        } else {
          const TensorF reg = regularizer_grad(ctx.soft.u, beta);
          grad_u.array() += static_cast<float>(cfg.lambda) * reg.array();
          ctx.adam_u.step(ctx.soft.u.data(), grad_u.data(),
                          static_cast<std::size_t>(grad_u.numel()));
        }
      }
      ++consumed;
    }
  };

  rep.events.push_back("scale_phase");
  run_phase(true, cfg.iters_scale, rep.iterations_scale);

  // Final discrete settle of the scale group. The descent landscape keeps its
  // minimum at the float scale (the roundings reproduce the weights there) and
  // its real-valued zero-point hides the integer snap applied at freeze time,
  // so the relief a neighbouring exponent offers after re-rounding is invisible
  // to the gradient. Each channel therefore tries both candidate exponents as
  // freezing would realize them (integer zero-point, nearest codes) against the
  // unit loss, one channel at a time, and v is pinned to the winner.
  rep.events.push_back("scale_settle");
  {
    const double top = static_cast<double>((1 << cfg.weight_bits) - 1);
    auto fill_channel = [&](const LayerCtx& ctx, TensorF& dst, Index c, int b) {
      const ChannelScale& cs = ctx.channels[static_cast<std::size_t>(c)];
      const double s = std::ldexp(1.0, cs.base_exponent + b);
      const double z = std::clamp(std::round(cs.float_scale * cs.zero_point / s), 0.0, top);
      const Index per = ctx.weight.numel() / static_cast<Index>(ctx.channels.size());
      for (Index i = c * per; i < (c + 1) * per; ++i) {
        const double code =
            std::clamp(std::round(static_cast<double>(ctx.weight[i]) / s + z), 0.0, top);
        dst[i] = static_cast<float>(s * (code - z));
      }
    };
    std::map<std::string, TensorF> cand;
    std::map<std::string, std::vector<int>> chosen;
    for (auto& [lid, ctx] : layers) {
      TensorF t(ctx.weight.shape());
      std::vector<int> bits(ctx.channels.size());
      for (Index c = 0; c < static_cast<Index>(ctx.channels.size()); ++c) {
        bits[static_cast<std::size_t>(c)] =
            static_cast<int>(std::round(rectified_sigmoid(ctx.soft.v[c])));
        fill_channel(ctx, t, c, bits[static_cast<std::size_t>(c)]);
      }
      chosen.emplace(lid, std::move(bits));
      cand.emplace(lid, std::move(t));
    }
    std::map<std::string, const TensorF*> cand_w;
    for (auto& [lid, t] : cand) cand_w.emplace(lid, &t);
    double cur = unit_pool_loss(runner, cand_w, biases, boundary, target, P);
    for (auto& [lid, ctx] : layers) {
      TensorF& t = cand.at(lid);
      std::vector<int>& bits = chosen.at(lid);
      for (Index c = 0; c < static_cast<Index>(ctx.channels.size()); ++c) {
        const int flip = 1 - bits[static_cast<std::size_t>(c)];
        fill_channel(ctx, t, c, flip);
        const double alt = unit_pool_loss(runner, cand_w, biases, boundary, target, P);
        if (alt < cur) {
          cur = alt;
          bits[static_cast<std::size_t>(c)] = flip;
          ctx.soft.v[c] = flip == 1 ? 3.0f : -3.0f;  // saturates h2 to the winner
        } else {
          fill_channel(ctx, t, c, bits[static_cast<std::size_t>(c)]);
        }
      }
    }
  }

  for (auto& [lid, ctx] : layers) freeze_exponents(ctx.channels, ctx.soft, cfg.weight_bits);
  rep.events.push_back("freeze_exponents");
  eval_soft();
  rep.loss_scale_phase = unit_pool_loss(runner, weights, biases, boundary, target, P);

  for (auto& [lid, ctx] : layers) {
    init_u(ctx.weight, ctx.channels, ctx.soft, cfg.weight_bits);
    ctx.adam_u = AdamState(static_cast<std::size_t>(ctx.weight.numel()), cfg.lr_u);
  }
  rep.events.push_back("round_phase");
  run_phase(false, cfg.iters_round, rep.iterations_round);
  eval_soft();
  rep.loss_round_phase = unit_pool_loss(runner, weights, biases, boundary, target, P);

  Index h1_total = 0, h1_binary = 0;
  for (auto& [lid, ctx] : layers)
    for (Index i = 0; i < ctx.eval.h1.numel(); ++i) {
      const double h = ctx.eval.h1[i];
      if (std::min(h, 1.0 - h) <= 1e-3) ++h1_binary;
      ++h1_total;
    }
  rep.h1_binary_1e3 =
      h1_total == 0 ? 1.0 : static_cast<double>(h1_binary) / static_cast<double>(h1_total);

  rep.events.push_back("harden");
  std::map<std::string, HardenResult> hard;
  double loose_weighted = 0.0;
  Index loose_total = 0;
  for (auto& [lid, ctx] : layers) {
    HardenResult hr = harden(ctx.weight, ctx.channels, ctx.soft, cfg.weight_bits);
    loose_weighted += hr.loose_fraction * static_cast<double>(ctx.weight.numel());
    loose_total += ctx.weight.numel();
    hard.emplace(lid, std::move(hr));
  }
  rep.loose_fraction = loose_total == 0 ? 0.0 : loose_weighted / static_cast<double>(loose_total);

  std::map<std::string, const TensorF*> hard_w;
  for (auto& [lid, hr] : hard) hard_w.emplace(lid, &hr.w_hat);
  rep.loss_hardened = unit_pool_loss(runner, hard_w, biases, boundary, target, P);

  std::map<std::string, NaiveLayer> naive;
  for (auto& [lid, ctx] : layers)
    naive.emplace(lid, naive_layer(ctx.weight, ctx.init_params, cfg.weight_bits));
  std::map<std::string, const TensorF*> naive_w;
  for (auto& [lid, nl] : naive) naive_w.emplace(lid, &nl.dequant);
  rep.loss_naive = unit_pool_loss(runner, naive_w, biases, boundary, target, P);

  // The learned result must never lose to the no-descent baseline; if it
  // does, the baseline assignment is kept instead.
  rep.events.push_back("baseline_guard");
  rep.fell_back_to_naive = rep.loss_naive < rep.loss_hardened;

  UnitResult result;
  for (const std::string& lid : unit.layer_ids) {
    LayerCtx& ctx = layers.at(lid);
    LayerQuant lq;
    lq.node_id = lid;
    if (rep.fell_back_to_naive) {
      NaiveLayer& nl = naive.at(lid);
      lq.weight_q = nl.params;
      lq.q_weight = nl.codes;
      result.dequant_weights.emplace(ctx.node->weight, nl.dequant);
    } else {
      HardenResult& hr = hard.at(lid);
      lq.weight_q = hr.params;
      lq.q_weight = hr.q_int;
      result.dequant_weights.emplace(ctx.node->weight, hr.w_hat);
    }
    lq.q_bias = TensorI::zeros(ctx.bias.shape());  // coded against the input
                                                   // scale at assembly time
    for (std::size_t c = 0; c < lq.weight_q.size(); ++c) {
      const int base = ctx.channels[c].base_exponent;
      const int e = lq.weight_q[c].exponent;
      if (e != base && e != base + 1) rep.exponents_in_band = false;
    }
    result.layers.push_back(std::move(lq));
  }
  result.report = std::move(rep);
  return result;
}

ReconstructResult reconstruct_weights(const Model& folded, const std::vector<BlockUnit>& units,
                                      const TensorF& pool, const ReconstructConfig& cfg,
                                      Rng& rng) {
  Executor fp_exec(folded);
  Executor q_exec(folded);
  ReconstructResult out;
  for (const BlockUnit& unit : units) {
    std::map<std::string, TensorF> boundary =
        run_tapped_batched(q_exec, pool, unit.boundary_inputs);
    TensorF target = run_tapped_batched(fp_exec, pool, {unit.output_id}).at(unit.output_id);
    UnitResult res = optimize_unit(folded, unit, boundary, target, cfg, rng);
    for (auto& [name, w] : res.dequant_weights) {
      q_exec.override_weight(name, w);
      out.dequant_weights.emplace(name, std::move(w));
    }
    for (LayerQuant& lq : res.layers) out.layers.push_back(std::move(lq));
    out.reports.push_back(std::move(res.report));
  }
  return out;
}

ReconstructResult naive_quantize_weights(const Model& folded, const std::vector<BlockUnit>& units,
                                         const TensorF& pool, int weight_bits) {
  Executor fp_exec(folded);
  ReconstructResult out;
  for (const BlockUnit& unit : units) {
    UnitRunner runner(folded.graph, unit);
    std::map<std::string, TensorF> boundary =
        run_tapped_batched(fp_exec, pool, unit.boundary_inputs);
    TensorF target = run_tapped_batched(fp_exec, pool, {unit.output_id}).at(unit.output_id);

    UnitReport rep;
    rep.unit_id = unit.id;
    rep.p_value = unit.p_value;
    rep.events = {"naive"};

    std::map<std::string, NaiveLayer> naive;
    std::vector<TensorF> bias_store;
    bias_store.reserve(unit.layer_ids.size());
    std::map<std::string, const TensorF*> naive_w, biases;
    for (const std::string& lid : unit.layer_ids) {
      const GraphNode& node = folded.graph.node(lid);
      const TensorF w = folded.weights.f32(node.weight);
      naive.emplace(lid, naive_layer(w, init_scale_mse_per_channel(w, weight_bits), weight_bits));
      bias_store.push_back(folded.weights.f32(node.bias));
    }
    std::size_t bi = 0;
    for (const std::string& lid : unit.layer_ids) {
      naive_w.emplace(lid, &naive.at(lid).dequant);
      biases.emplace(lid, &bias_store[bi++]);
    }
    rep.loss_naive = unit_pool_loss(runner, naive_w, biases, boundary, target, unit.p_value);
    rep.loss_hardened = rep.loss_naive;

    for (const std::string& lid : unit.layer_ids) {
      NaiveLayer& nl = naive.at(lid);
      LayerQuant lq;
      lq.node_id = lid;
      lq.weight_q = std::move(nl.params);
      lq.q_weight = std::move(nl.codes);
      lq.q_bias = TensorI::zeros({nl.dequant.dim(0)});
      out.layers.push_back(std::move(lq));
      out.dequant_weights.emplace(folded.graph.node(lid).weight, std::move(nl.dequant));
    }
    out.reports.push_back(std::move(rep));
  }
  return out;
}

}  // namespace rapq
