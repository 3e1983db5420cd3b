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

#include "rapq/actquant.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <set>

#include "rapq/adam.hpp"
#include "rapq/error.hpp"
#include "rapq/executor.hpp"
#include "rapq/reconstruct.hpp"
#include "rapq/unit_runner.hpp"

namespace rapq {

namespace {

constexpr double kLn2 = 0.6931471805599453;

int zero_from_min(double x_min, double s, const QuantParams& q) {
  const double z = std::round(-x_min / s);
  return static_cast<int>(
      std::clamp(z, static_cast<double>(q.range_lo), static_cast<double>(q.range_hi)));
}

}  // namespace

TensorF qdq_act(const TensorF& x, const QuantParams& q, TensorF* mask) {
  const double s = q.scale();
  const double z = q.zero_point;
  const double lo = q.range_lo;
  const double hi = q.range_hi;
  TensorF out(x.shape());
  if (mask) *mask = TensorF(x.shape());
  for (Index i = 0; i < x.numel(); ++i) {
    const double t = static_cast<double>(x[i]) / s + z;
    const double r = std::round(t);
    out[i] = static_cast<float>(s * (std::clamp(r, lo, hi) - z));
    if (mask) (*mask)[i] = (r >= lo && r <= hi) ? 1.0f : 0.0f;
  }
  return out;
}

TensorF act_scale_grad(const TensorF& x, const QuantParams& q, GradVariant variant) {
  const double s = q.scale();
  const double z = q.zero_point;
  const double lo = q.range_lo;
  const double hi = q.range_hi;
  const double above = variant == GradVariant::Paper
                           ? std::ldexp(1.0, q.bit_width - 1)  // constant printed form
                           : hi - z;
  const double below = variant == GradVariant::Paper ? 0.0 : -z;
  TensorF g(x.shape());
  for (Index i = 0; i < x.numel(); ++i) {
    const double t = static_cast<double>(x[i]) / s + z;
    const double r = std::round(t);
    double v;
    if (r < lo)
      v = s * kLn2 * below;
    else if (r > hi)
      v = s * kLn2 * above;
    else
      v = s * kLn2 * (r - t);
    g[i] = static_cast<float>(v);
  }
  return g;
}

ActSitePlan plan_act_sites(const ModelGraph& graph, const std::vector<BlockUnit>& units) {
  ActSitePlan plan;
  for (std::size_t k = 0; k < units.size(); ++k) {
    const auto& bs = units[k].boundary_inputs;
    if (std::find(bs.begin(), bs.end(), "input") != bs.end()) {
      plan.site_ids.push_back("input");
      plan.owner_unit.emplace("input", k);
      break;
    }
  }
  for (std::size_t k = 0; k < units.size(); ++k) {
    for (const std::string& id : units[k].node_ids) {
      const GraphNode& n = graph.node(id);
      bool site = false;
      if (n.kind == "relu") {
        site = true;
      } else if (n.kind == "add") {
        const auto cons = graph.consumers(id);
        site = !(cons.size() == 1 && graph.node(cons[0]).kind == "relu");
      }
      if (site) {
        plan.site_ids.push_back(id);
        plan.owner_unit.emplace(id, k);
      }
    }
  }
  return plan;
}

ActQuantResult optimize_act_scales(const Model& folded, const std::vector<BlockUnit>& units,
                                   const std::map<std::string, TensorF>& dequant_weights,
                                   const TensorF& pool, const ActOptConfig& cfg, Rng& rng) {
  const ActSitePlan plan = plan_act_sites(folded.graph, units);
  ActQuantResult result;

  Executor fp_exec(folded);
  Executor q_exec(folded);
  for (const auto& [name, w] : dequant_weights) q_exec.override_weight(name, w);
  auto frozen = std::make_shared<std::map<std::string, QuantParams>>();
  q_exec.set_node_hook([frozen](const std::string& id, TensorF& v) {
    const auto it = frozen->find(id);
    if (it != frozen->end()) v = qdq_act(v, it->second);
  });

  const Index pool_n = pool.dim(0);

  for (std::size_t k = 0; k < units.size(); ++k) {
    const BlockUnit& unit = units[k];

    struct SiteState {
      std::string id;
      bool is_boundary = false;
      ActQuantizer aq;
    };
    std::vector<SiteState> sites;
    for (const std::string& sid : plan.site_ids)
      if (plan.owner_unit.at(sid) == k) {
        SiteState st;
        st.id = sid;
        st.is_boundary = sid == "input";
        st.aq.node_id = sid;
        sites.push_back(std::move(st));
      }
    if (sites.empty()) {
      result.events.push_back("unit " + unit.id + ": no activation sites");
      continue;
    }
    if (pool_n < cfg.batch)
      raise(ErrorCode::InvalidArgument, "optimize_act_scales: pool smaller than batch");

    UnitRunner runner(folded.graph, unit);
    std::vector<TensorF> store;
    store.reserve(unit.layer_ids.size() * 2);
    std::map<std::string, const TensorF*> wmap, bmap;
    for (const std::string& lid : unit.layer_ids) {
      const GraphNode& n = folded.graph.node(lid);
      store.push_back(dequant_weights.count(n.weight) ? dequant_weights.at(n.weight)
                                                      : folded.weights.f32(n.weight));
      store.push_back(folded.weights.f32(n.bias));
    }
    for (std::size_t li = 0; li < unit.layer_ids.size(); ++li) {
      wmap.emplace(unit.layer_ids[li], &store[li * 2]);
      bmap.emplace(unit.layer_ids[li], &store[li * 2 + 1]);
    }

    std::map<std::string, TensorF> boundary =
        run_tapped_batched(q_exec, pool, unit.boundary_inputs, cfg.pool_chunk);
    const TensorF target =
        run_tapped_batched(fp_exec, pool, {unit.output_id}, cfg.pool_chunk).at(unit.output_id);

    std::set<std::string> internal;
    for (const auto& st : sites)
      if (!st.is_boundary) internal.insert(st.id);

    // raw pre-quantization activations over the pool, for scale and
    // zero-point initialization
    std::map<std::string, TensorF> raw_site;
    for (Index start = 0; start < pool_n; start += cfg.pool_chunk) {
      const Index count = std::min(cfg.pool_chunk, pool_n - start);
      std::vector<Index> idx(static_cast<std::size_t>(count));
      std::iota(idx.begin(), idx.end(), start);
      std::map<std::string, TensorF> bnd;
      for (const auto& [bid, bp] : boundary) bnd.emplace(bid, gather_batch(bp, idx));
      UnitTape tape;
      runner.forward(wmap, bmap, bnd, tape);
      for (const std::string& id : internal) {
        const TensorF& part = tape.out.at(id);
        const Index stride = part.numel() / count;
        TensorF& dst = raw_site[id];
        if (start == 0) {
          Shape s = part.shape();
          s[0] = pool_n;
          dst = TensorF(std::move(s));
        }
        std::copy(part.data(), part.data() + count * stride, dst.data() + start * stride);
      }
    }
    for (const auto& st : sites)
      if (st.is_boundary) raw_site.emplace(st.id, boundary.at(st.id));

    std::vector<float> log2s(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i) {
      SiteState& st = sites[i];
      const TensorF& raw = raw_site.at(st.id);
      QuantParams q0 = init_scale_mse(raw, cfg.act_bits, Signedness::AsymmetricUnsigned);
      st.aq.calib_min = static_cast<double>(raw.array().minCoeff());
      st.aq.q = q0;
      st.aq.q.zero_point = zero_from_min(st.aq.calib_min, q0.float_scale, q0);
      st.aq.log2_scale = std::log2(q0.float_scale);
      log2s[i] = static_cast<float>(st.aq.log2_scale);
    }

    auto site_index = [&](const std::string& id) {
      for (std::size_t i = 0; i < sites.size(); ++i)
        if (sites[i].id == id) return i;
      raise(ErrorCode::Contract, "unknown activation site " + id);
    };

    // pool loss at one integer exponent assignment, memoized
    std::map<std::vector<int>, double> memo;
    auto tuple_loss = [&](const std::vector<int>& tuple) {
      const auto hit = memo.find(tuple);
      if (hit != memo.end()) return hit->second;
      std::map<std::string, QuantParams> hardq;
      for (std::size_t i = 0; i < sites.size(); ++i) {
        QuantParams q = sites[i].aq.q;
        q.hardened = true;
        q.exponent = tuple[i];
        q.float_scale = std::ldexp(1.0, tuple[i]);
        q.zero_point = update_zero_point(sites[i].aq.calib_min, tuple[i], q);
        hardq.emplace(sites[i].id, q);
      }
      UnitRunner::Hook hook = [&](const std::string& id, TensorF& v, TensorF& mask) {
        v = qdq_act(v, hardq.at(id), &mask);
      };
      double acc = 0.0;
      for (Index start = 0; start < pool_n; start += cfg.pool_chunk) {
        const Index count = std::min(cfg.pool_chunk, pool_n - start);
        std::vector<Index> idx(static_cast<std::size_t>(count));
        std::iota(idx.begin(), idx.end(), start);
        std::map<std::string, TensorF> bnd;
        for (const auto& [bid, bp] : boundary) bnd.emplace(bid, gather_batch(bp, idx));
        const auto hq = hardq.find("input");
        if (hq != hardq.end()) bnd.at("input") = qdq_act(bnd.at("input"), hq->second);
        UnitTape tape;
        const TensorF out = runner.forward(wmap, bmap, bnd, tape, &hook, &internal);
        acc += lp_loss(out, gather_batch(target, idx), unit.p_value) *
               static_cast<double>(count);
      }
      const double loss = acc / static_cast<double>(pool_n);
      memo.emplace(tuple, loss);
      return loss;
    };

    auto current_tuple = [&]() {
      std::vector<int> t(sites.size());
      for (std::size_t i = 0; i < sites.size(); ++i)
        t[i] = static_cast<int>(std::lround(static_cast<double>(log2s[i])));
      return t;
    };

    const std::vector<int> init_tuple = current_tuple();
    std::vector<int> best_tuple = init_tuple;
    double best_loss = tuple_loss(init_tuple);
    const double loss_init = best_loss;

    const bool has_boundary_site =
        std::any_of(sites.begin(), sites.end(), [](const SiteState& s) { return s.is_boundary; });
    AdamState adam(sites.size(), cfg.lr);

    for (Index it = 0; it < cfg.iters; ++it) {
      const std::vector<Index> idx = sample_indices(pool_n, cfg.batch, rng);
      std::map<std::string, TensorF> bnd;
      for (const auto& [bid, bp] : boundary) bnd.emplace(bid, gather_batch(bp, idx));

      for (std::size_t i = 0; i < sites.size(); ++i) {
        QuantParams& q = sites[i].aq.q;
        q.hardened = false;
        q.float_scale = std::exp2(static_cast<double>(log2s[i]));
        q.zero_point = zero_from_min(sites[i].aq.calib_min, q.float_scale, q);
      }

      TensorF raw_input;
      for (const SiteState& st : sites)
        if (st.is_boundary) {
          raw_input = bnd.at(st.id);
          bnd.at(st.id) = qdq_act(raw_input, st.aq.q);
        }
      UnitRunner::Hook hook = [&](const std::string& id, TensorF& v, TensorF& mask) {
        v = qdq_act(v, sites[site_index(id)].aq.q, &mask);
      };
      UnitTape tape;
      const TensorF out = runner.forward(wmap, bmap, bnd, tape, &hook, &internal);
      const TensorF tgt = gather_batch(target, idx);
      const double loss = lp_loss(out, tgt, unit.p_value);
      if (!std::isfinite(loss))
        raise(ErrorCode::Divergence, "unit " + unit.id + ": non-finite activation loss at " +
                                         std::to_string(it));
      const auto grads = runner.backward(lp_loss_grad(out, tgt, unit.p_value), wmap, bnd, tape,
                                         has_boundary_site);

      std::vector<float> ge(sites.size(), 0.0f);
      for (std::size_t i = 0; i < sites.size(); ++i) {
        const SiteState& st = sites[i];
        const TensorF& upstream =
            st.is_boundary ? grads.boundary.at(st.id) : grads.hooked_out.at(st.id);
        const TensorF& raw = st.is_boundary ? raw_input : tape.pre.at(st.id);
        const TensorF gs = act_scale_grad(raw, st.aq.q, cfg.variant);
        ge[i] = static_cast<float>(
            (upstream.array().cast<double>() * gs.array().cast<double>()).sum());
      }
      adam.step(log2s.data(), ge.data(), log2s.size());

      const double l = tuple_loss(current_tuple());
      if (l < best_loss) {
        best_loss = l;
        best_tuple = current_tuple();
      }
    }

    // local +-1 sweep around the best tuple, two passes
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t i = 0; i < sites.size(); ++i)
        for (int d : {-1, 1}) {
          std::vector<int> cand = best_tuple;
          cand[i] += d;
          const double l = tuple_loss(cand);
          if (l < best_loss) {
            best_loss = l;
            best_tuple = cand;
          }
        }

    for (std::size_t i = 0; i < sites.size(); ++i) {
      SiteState& st = sites[i];
      QuantParams& q = st.aq.q;
      q.hardened = true;
      q.exponent = best_tuple[i];
      q.float_scale = std::ldexp(1.0, best_tuple[i]);
      q.zero_point = update_zero_point(st.aq.calib_min, best_tuple[i], q);
      st.aq.log2_scale = best_tuple[i];
      frozen->emplace(st.id, q);
      result.acts.push_back(ActQuant{st.id, q});

      ActSiteReport r;
      r.node_id = st.id;
      r.unit_index = k;
      r.init_exponent = init_tuple[i];
      r.final_exponent = best_tuple[i];
      r.loss_init = loss_init;
      r.loss_best = best_loss;
      r.iterations = cfg.iters;
      r.tuples_tried = static_cast<Index>(memo.size());
      result.sites.push_back(std::move(r));
      result.events.push_back("unit " + unit.id + ": site " + st.id + " exponent " +
                              std::to_string(best_tuple[i]));
    }
  }
  return result;
}

ActQuantResult naive_act_scales(const Model& folded, const std::vector<BlockUnit>& units,
                                const TensorF& pool, int act_bits, Index pool_chunk) {
  const ActSitePlan plan = plan_act_sites(folded.graph, units);
  Executor fp_exec(folded);
  const std::map<std::string, TensorF> taps =
      run_tapped_batched(fp_exec, pool, plan.site_ids, pool_chunk);

  ActQuantResult result;
  for (const std::string& sid : plan.site_ids) {
    const TensorF& raw = taps.at(sid);
    QuantParams q = init_scale_mse(raw, act_bits, Signedness::AsymmetricUnsigned);
    const double calib_min = static_cast<double>(raw.array().minCoeff());
    const int e = naive_pow2_scale(q.float_scale);
    q.hardened = true;
    q.exponent = e;
    q.float_scale = std::ldexp(1.0, e);
    q.zero_point = update_zero_point(calib_min, e, q);
    result.acts.push_back(ActQuant{sid, q});

    ActSiteReport r;
    r.node_id = sid;
    r.unit_index = plan.owner_unit.at(sid);
    r.init_exponent = e;
    r.final_exponent = e;
    r.iterations = 0;
    r.tuples_tried = 1;
    result.sites.push_back(std::move(r));
  }
  return result;
}

}  // namespace rapq
