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

#include "rapq/shiftinfer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#include "rapq/blocks.hpp"
#include "rapq/error.hpp"
#include "rapq/nn.hpp"
#include "rapq/quantizer.hpp"

namespace rapq {

namespace {

constexpr std::int64_t kInt32Max = std::numeric_limits<std::int32_t>::max();

void check_int32(std::int64_t v, const std::string& where) {
  if (v > kInt32Max || v < -kInt32Max - 1)
    raise(ErrorCode::Overflow, "accumulator overflow in layer " + where);
}

// One value flowing between nodes: either stored low-bit codes with their
// site quantizer, or centered raw accumulators with per-channel exponents.
struct IntVal {
  bool is_codes = false;
  TensorI v;
  std::vector<int> exponents;  // accumulators only
  QuantParams q;               // codes only
};

Index channel_count(const TensorI& t) { return t.ndim() == 4 ? t.dim(1) : Index{1}; }

// codes -> centered integers at one exponent per channel
std::pair<TensorI, std::vector<int>> centered(const IntVal& val) {
  if (!val.is_codes) return {val.v, val.exponents};
  TensorI c(val.v.shape());
  for (Index i = 0; i < c.numel(); ++i) c[i] = val.v[i] - val.q.zero_point;
  return {std::move(c), std::vector<int>(static_cast<std::size_t>(channel_count(val.v)),
                                         val.q.exponent)};
}

std::int64_t shift_left_checked(std::int64_t v, int k, const std::string& where) {
  const std::int64_t r = v << k;
  check_int32(r, where);
  return r;
}

}  // namespace

std::int32_t rshift_round(std::int64_t v, int k) {
  if (k < 0) raise(ErrorCode::InvalidArgument, "rshift_round: negative shift");
  if (k == 0) return static_cast<std::int32_t>(v);
  const std::int64_t mag = v < 0 ? -v : v;
  const std::int64_t r = (mag + (std::int64_t{1} << (k - 1))) >> k;
  return static_cast<std::int32_t>(v < 0 ? -r : r);
}

void require_hardened(const QuantizedModel& model) {
  auto check = [](const QuantParams& q, const std::string& where) {
    if (!q.hardened || q.float_scale != std::ldexp(1.0, q.exponent))
      raise(ErrorCode::Contract, "non-power-of-two scale at " + where);
    if (q.zero_point < q.range_lo || q.zero_point > q.range_hi)
      raise(ErrorCode::Contract, "zero point out of range at " + where);
  };
  for (const auto& lq : model.layers) {
    if (lq.weight_q.empty())
      raise(ErrorCode::Contract, "layer " + lq.node_id + " has no quantizers");
    for (const auto& q : lq.weight_q) check(q, "weights of " + lq.node_id);
  }
  for (const auto& aq : model.acts) check(aq.q, "activation " + aq.node_id);
  if (!model.has_act("input"))
    raise(ErrorCode::Contract, "model has no input activation quantizer");
}

IntAccum conv2d_int(const TensorI& codes, const QuantParams& x_q, const GraphNode& node,
                    const LayerQuant& lq, IntPathStats* stats) {
  const TensorI& w = lq.q_weight;
  const ConvDims d = conv_dims(codes.shape(), w.shape(), node.stride, node.pad);
  IntAccum out;
  out.acc = TensorI({d.batch, d.out_ch, d.out_h, d.out_w});
  out.exponents.resize(static_cast<std::size_t>(d.out_ch));

  const int z_x = x_q.zero_point;
  const std::int64_t code_span_x = x_q.range_hi - x_q.range_lo;
  for (Index oc = 0; oc < d.out_ch; ++oc) {
    const QuantParams& wq = lq.weight_q[static_cast<std::size_t>(oc)];
    out.exponents[static_cast<std::size_t>(oc)] = wq.exponent + x_q.exponent;
  }

  for (Index n = 0; n < d.batch; ++n)
    for (Index oc = 0; oc < d.out_ch; ++oc) {
      const QuantParams& wq = lq.weight_q[static_cast<std::size_t>(oc)];
      const int z_w = wq.zero_point;
      const std::int64_t q_b = lq.q_bias.numel() > 0 ? lq.q_bias[oc] : 0;
      const std::int64_t bound =
          d.patch() * code_span_x * (wq.range_hi - wq.range_lo) + (q_b < 0 ? -q_b : q_b);
      for (Index oy = 0; oy < d.out_h; ++oy)
        for (Index ox = 0; ox < d.out_w; ++ox) {
          std::int64_t acc = q_b;
          for (Index ic = 0; ic < d.in_ch; ++ic)
            for (Index ky = 0; ky < d.k_h; ++ky) {
              const Index iy = oy * d.stride - d.pad + ky;
              if (iy < 0 || iy >= d.in_h) continue;  // pad reads are z_x: zero term
              for (Index kx = 0; kx < d.k_w; ++kx) {
                const Index ix = ox * d.stride - d.pad + kx;
                if (ix < 0 || ix >= d.in_w) continue;
                const std::int64_t qx =
                    codes[((n * d.in_ch + ic) * d.in_h + iy) * d.in_w + ix];
                const std::int64_t qw =
                    w[((oc * d.in_ch + ic) * d.k_h + ky) * d.k_w + kx];
                acc += (qw - z_w) * (qx - z_x);
              }
            }
          check_int32(acc, node.id);
          if (acc > bound || acc < -bound)
            raise(ErrorCode::Contract,
                  "accumulator exceeds its analytic bound in layer " + node.id);
          out.acc[((n * d.out_ch + oc) * d.out_h + oy) * d.out_w + ox] =
              static_cast<std::int32_t>(acc);
        }
      if (stats) stats->int_macs += d.out_spatial() * d.patch();
    }
  return out;
}

IntAccum linear_int(const TensorI& codes, const QuantParams& x_q, const LayerQuant& lq,
                    const std::string& node_id, IntPathStats* stats) {
  if (codes.ndim() != 2)
    raise(ErrorCode::ShapeMismatch, "linear_int: expected 2-d codes for " + node_id);
  const TensorI& w = lq.q_weight;
  const Index n_rows = codes.dim(0), k = codes.dim(1), out_n = w.dim(0);
  if (w.dim(1) != k) raise(ErrorCode::ShapeMismatch, "linear_int: weight/input mismatch");

  IntAccum out;
  out.acc = TensorI({n_rows, out_n});
  out.exponents.resize(static_cast<std::size_t>(out_n));
  const int z_x = x_q.zero_point;
  const std::int64_t span_x = x_q.range_hi - x_q.range_lo;

  for (Index o = 0; o < out_n; ++o)
    out.exponents[static_cast<std::size_t>(o)] =
        lq.weight_q[static_cast<std::size_t>(o)].exponent + x_q.exponent;

  for (Index n = 0; n < n_rows; ++n)
    for (Index o = 0; o < out_n; ++o) {
      const QuantParams& wq = lq.weight_q[static_cast<std::size_t>(o)];
      const std::int64_t q_b = lq.q_bias.numel() > 0 ? lq.q_bias[o] : 0;
      const std::int64_t bound =
          k * span_x * (wq.range_hi - wq.range_lo) + (q_b < 0 ? -q_b : q_b);
      std::int64_t acc = q_b;
      for (Index j = 0; j < k; ++j)
        acc += (std::int64_t{w[o * k + j]} - wq.zero_point) *
               (std::int64_t{codes[n * k + j]} - z_x);
      check_int32(acc, node_id);
      if (acc > bound || acc < -bound)
        raise(ErrorCode::Contract,
              "accumulator exceeds its analytic bound in layer " + node_id);
      out.acc[n * out_n + o] = static_cast<std::int32_t>(acc);
      if (stats) stats->int_macs += k;
    }
  return out;
}

namespace {

// acc -> site codes. Fusing relu means clamping no lower than the zero point,
// which is exactly quantize(max(x, 0)).
TensorI requant_to_site(const IntAccum& in, const QuantParams& site, bool fuse_relu,
                        const std::string& where, IntPathStats* stats) {
  TensorI codes(in.acc.shape());
  const Index channels = static_cast<Index>(in.exponents.size());
  const Index batch = in.acc.dim(0);
  const Index per = in.acc.numel() / (batch * channels);
  const int lo = fuse_relu ? site.zero_point : site.range_lo;
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < channels; ++c) {
      const int k = site.exponent - in.exponents[static_cast<std::size_t>(c)];
      for (Index i = 0; i < per; ++i) {
        const Index at = (n * channels + c) * per + i;
        std::int64_t shifted;
        if (k >= 0) {
          shifted = rshift_round(in.acc[at], k);
        } else {
          shifted = shift_left_checked(in.acc[at], -k, where);
        }
        const std::int64_t q = site.zero_point + shifted;
        codes[at] = static_cast<std::int32_t>(
            std::clamp<std::int64_t>(q, lo, site.range_hi));
      }
      if (stats) stats->shifts += per;
    }
  return codes;
}

IntVal add_int(const IntVal& a, const IntVal& b, const std::string& where,
               IntPathStats* stats) {
  auto [av, ae] = centered(a);
  auto [bv, be] = centered(b);
  if (av.shape() != bv.shape())
    raise(ErrorCode::ShapeMismatch, "integer add shape mismatch at " + where);
  if (ae.size() != be.size())
    raise(ErrorCode::Contract, "integer add channel mismatch at " + where);
  const Index channels = static_cast<Index>(ae.size());
  const Index batch = av.dim(0);
  const Index per = av.numel() / (batch * channels);

  IntVal out;
  out.is_codes = false;
  out.v = TensorI(av.shape());
  out.exponents.resize(static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c) {
    const int ea = ae[static_cast<std::size_t>(c)];
    const int eb = be[static_cast<std::size_t>(c)];
    const int ec = std::min(ea, eb);
    out.exponents[static_cast<std::size_t>(c)] = ec;
    for (Index n = 0; n < batch; ++n)
      for (Index i = 0; i < per; ++i) {
        const Index at = (n * channels + c) * per + i;
        const std::int64_t lhs = shift_left_checked(av[at], ea - ec, where);
        const std::int64_t rhs = shift_left_checked(bv[at], eb - ec, where);
        check_int32(lhs + rhs, where);
        out.v[at] = static_cast<std::int32_t>(lhs + rhs);
      }
    if (stats) stats->shifts += batch * per * 2;
  }
  return out;
}

}  // namespace

IntTaps infer_int(const QuantizedModel& model, const TensorF& images, IntPathStats* stats) {
  require_hardened(model);
  if (images.ndim() != 4 || images.dim(0) == 0)
    raise(ErrorCode::InvalidArgument, "infer_int: expected a non-empty NCHW batch");

  IntTaps taps;
  std::map<std::string, IntVal> vals;

  {
    const QuantParams& q0 = model.act("input").q;
    IntVal in;
    in.is_codes = true;
    in.q = q0;
    in.v = TensorI(images.shape());
    for (Index i = 0; i < images.numel(); ++i) {
      const double t = std::ldexp(static_cast<double>(images[i]), -q0.exponent);
      const double r = std::round(t) + q0.zero_point;
      in.v[i] = static_cast<std::int32_t>(std::clamp(
          r, static_cast<double>(q0.range_lo), static_cast<double>(q0.range_hi)));
    }
    if (stats) stats->shifts += images.numel();
    taps.codes.emplace("input", in.v);
    vals.emplace("input", std::move(in));
  }

  for (const std::string& id : topo_order(model.graph)) {
    const GraphNode& node = model.graph.node(id);
    const IntVal& in0 = vals.at(node.inputs.at(0));
    if (node.kind == "conv2d" || node.kind == "linear") {
      if (!in0.is_codes)
        raise(ErrorCode::Contract, "layer " + id + " input is not site-quantized");
      IntVal out;
      out.is_codes = false;
      IntAccum acc = node.kind == "conv2d"
                         ? conv2d_int(in0.v, in0.q, node, model.layer(id), stats)
                         : linear_int(in0.v, in0.q, model.layer(id), id, stats);
      out.v = std::move(acc.acc);
      out.exponents = std::move(acc.exponents);
      vals.emplace(id, std::move(out));
    } else if (node.kind == "relu" || node.kind == "add") {
      IntVal out;
      if (node.kind == "add") {
        out = add_int(in0, vals.at(node.inputs.at(1)), id, stats);
      } else {
        if (in0.is_codes)
          raise(ErrorCode::Contract, "relu " + id + " expects raw accumulators");
        out = in0;  // copy of accumulators
      }
      if (model.has_act(id)) {
        const QuantParams& site = model.act(id).q;
        IntAccum tmp{std::move(out.v), std::move(out.exponents)};
        IntVal coded;
        coded.is_codes = true;
        coded.q = site;
        coded.v = requant_to_site(tmp, site, node.kind == "relu", id, stats);
        taps.codes.emplace(id, coded.v);
        vals.emplace(id, std::move(coded));
      } else if (node.kind == "relu") {
        raise(ErrorCode::Contract, "relu " + id + " has no activation quantizer");
      } else {
        vals.emplace(id, std::move(out));
      }
    } else if (node.kind == "flatten") {
      if (!in0.is_codes)
        raise(ErrorCode::Contract, "flatten " + id + " expects site codes");
      IntVal out = in0;
      out.v = out.v.reshaped({out.v.dim(0), out.v.numel() / out.v.dim(0)});
      vals.emplace(id, std::move(out));
    } else {
      raise(ErrorCode::InvalidArgument, "integer path does not support op " + node.kind);
    }
  }

  const IntVal& out = vals.at(model.graph.output);
  if (out.is_codes) {
    taps.logits = TensorD(out.v.shape());
    for (Index i = 0; i < out.v.numel(); ++i)
      taps.logits[i] =
          std::ldexp(static_cast<double>(out.v[i] - out.q.zero_point), out.q.exponent);
  } else {
    const Index channels = out.v.ndim() == 2 ? out.v.dim(1) : channel_count(out.v);
    const Index batch = out.v.dim(0);
    const Index per = out.v.numel() / (batch * channels);
    taps.logits = TensorD(out.v.shape());
    for (Index n = 0; n < batch; ++n)
      for (Index c = 0; c < channels; ++c)
        for (Index i = 0; i < per; ++i) {
          const Index at = (n * channels + c) * per + i;
          taps.logits[at] = std::ldexp(static_cast<double>(out.v[at]),
                                       out.exponents[static_cast<std::size_t>(c)]);
        }
    if (stats) stats->shifts += out.v.numel();
  }
  return taps;
}

IntTaps sim_quantized(const QuantizedModel& model, const TensorF& images) {
  require_hardened(model);
  IntTaps taps;
  std::map<std::string, TensorD> vals;
  // which site quantizer produced each value; needed for bias exponents
  std::map<std::string, const QuantParams*> site_of;

  {
    const QuantParams& q0 = model.act("input").q;
    const double s = std::ldexp(1.0, q0.exponent);
    TensorD x(images.shape());
    TensorI codes(images.shape());
    for (Index i = 0; i < images.numel(); ++i) {
      const double r = std::round(static_cast<double>(images[i]) / s);
      const double q = std::clamp(r + q0.zero_point, static_cast<double>(q0.range_lo),
                                  static_cast<double>(q0.range_hi));
      codes[i] = static_cast<std::int32_t>(q);
      x[i] = s * (q - q0.zero_point);
    }
    taps.codes.emplace("input", std::move(codes));
    vals.emplace("input", std::move(x));
    site_of.emplace("input", &model.act("input").q);
  }

  for (const std::string& id : topo_order(model.graph)) {
    const GraphNode& node = model.graph.node(id);
    const TensorD& in0 = vals.at(node.inputs.at(0));
    if (node.kind == "conv2d") {
      const LayerQuant& lq = model.layer(id);
      const ConvDims d = conv_dims(in0.shape(), lq.q_weight.shape(), node.stride, node.pad);
      TensorD y({d.batch, d.out_ch, d.out_h, d.out_w});
      const int e_in = site_of.at(node.inputs.at(0))->exponent;
      for (Index n = 0; n < d.batch; ++n)
        for (Index oc = 0; oc < d.out_ch; ++oc) {
          const QuantParams& wq = lq.weight_q[static_cast<std::size_t>(oc)];
          const double bias =
              lq.q_bias.numel() > 0
                  ? std::ldexp(static_cast<double>(lq.q_bias[oc]), wq.exponent + e_in)
                  : 0.0;
          for (Index oy = 0; oy < d.out_h; ++oy)
            for (Index ox = 0; ox < d.out_w; ++ox) {
              double acc = bias;
              for (Index ic = 0; ic < d.in_ch; ++ic)
                for (Index ky = 0; ky < d.k_h; ++ky) {
                  const Index iy = oy * d.stride - d.pad + ky;
                  if (iy < 0 || iy >= d.in_h) continue;
                  for (Index kx = 0; kx < d.k_w; ++kx) {
                    const Index ix = ox * d.stride - d.pad + kx;
                    if (ix < 0 || ix >= d.in_w) continue;
                    const double wv = std::ldexp(
                        static_cast<double>(
                            lq.q_weight[((oc * d.in_ch + ic) * d.k_h + ky) * d.k_w + kx] -
                            wq.zero_point),
                        wq.exponent);
                    acc += wv * in0[((n * d.in_ch + ic) * d.in_h + iy) * d.in_w + ix];
                  }
                }
              y[((n * d.out_ch + oc) * d.out_h + oy) * d.out_w + ox] = acc;
            }
        }
      vals.emplace(id, std::move(y));
    } else if (node.kind == "linear") {
      const LayerQuant& lq = model.layer(id);
      const Index n_rows = in0.dim(0), k = in0.dim(1), out_n = lq.q_weight.dim(0);
      TensorD y({n_rows, out_n});
      const int e_in = site_of.at(node.inputs.at(0))->exponent;
      for (Index n = 0; n < n_rows; ++n)
        for (Index o = 0; o < out_n; ++o) {
          const QuantParams& wq = lq.weight_q[static_cast<std::size_t>(o)];
          double acc = lq.q_bias.numel() > 0
                           ? std::ldexp(static_cast<double>(lq.q_bias[o]),
                                        wq.exponent + e_in)
                           : 0.0;
          for (Index j = 0; j < k; ++j)
            acc += std::ldexp(static_cast<double>(lq.q_weight[o * k + j] - wq.zero_point),
                              wq.exponent) *
                   in0[n * k + j];
          y[n * out_n + o] = acc;
        }
      vals.emplace(id, std::move(y));
    } else if (node.kind == "relu" || node.kind == "add") {
      TensorD y(in0.shape());
      if (node.kind == "relu") {
        for (Index i = 0; i < y.numel(); ++i) y[i] = in0[i] > 0.0 ? in0[i] : 0.0;
      } else {
        const TensorD& in1 = vals.at(node.inputs.at(1));
        for (Index i = 0; i < y.numel(); ++i) y[i] = in0[i] + in1[i];
      }
      if (model.has_act(id)) {
        const QuantParams& site = model.act(id).q;
        const double s = std::ldexp(1.0, site.exponent);
        TensorI codes(y.shape());
        for (Index i = 0; i < y.numel(); ++i) {
          const double q =
              std::clamp(std::round(y[i] / s) + site.zero_point,
                         static_cast<double>(site.range_lo),
                         static_cast<double>(site.range_hi));
          codes[i] = static_cast<std::int32_t>(q);
          y[i] = s * (q - site.zero_point);
        }
        taps.codes.emplace(id, std::move(codes));
        site_of.emplace(id, &model.act(id).q);
      }
      vals.emplace(id, std::move(y));
    } else if (node.kind == "flatten") {
      TensorD y = in0.reshaped({in0.dim(0), in0.numel() / in0.dim(0)});
      if (site_of.count(node.inputs.at(0)))
        site_of.emplace(id, site_of.at(node.inputs.at(0)));
      vals.emplace(id, std::move(y));
    } else {
      raise(ErrorCode::InvalidArgument, "simulation does not support op " + node.kind);
    }
  }
  taps.logits = vals.at(model.graph.output);
  return taps;
}

EquivReport compare_taps(const IntTaps& a, const IntTaps& b, const ModelGraph& graph) {
  EquivReport rep;
  std::vector<std::string> order{"input"};
  for (const std::string& id : topo_order(graph))
    if (a.codes.count(id)) order.push_back(id);

  for (const std::string& id : order) {
    const TensorI& av = a.codes.at(id);
    const TensorI& bv = b.codes.at(id);
    for (Index i = 0; i < av.numel(); ++i)
      if (av[i] != bv[i]) {
        ++rep.mismatches;
        const double dev = std::abs(static_cast<double>(av[i]) - bv[i]);
        if (rep.first_mismatch_node.empty()) rep.first_mismatch_node = id;
        if (dev > rep.max_abs_dev) rep.max_abs_dev = dev;
      }
    if (!rep.first_mismatch_node.empty()) break;  // localize to the first site
  }
  if (rep.first_mismatch_node.empty()) {
    for (Index i = 0; i < a.logits.numel(); ++i) {
      if (a.logits[i] != b.logits[i]) {
        ++rep.mismatches;
        if (rep.first_mismatch_node.empty()) rep.first_mismatch_node = "logits";
        rep.max_abs_dev = std::max(rep.max_abs_dev, std::abs(a.logits[i] - b.logits[i]));
      }
    }
  }
  rep.ok = rep.mismatches == 0;
  return rep;
}

EquivReport equivalence_check(const QuantizedModel& model, const TensorF& images) {
  IntPathStats stats;
  const IntTaps a = infer_int(model, images, &stats);
  const IntTaps b = sim_quantized(model, images);
  EquivReport rep = compare_taps(a, b, model.graph);
  rep.stats = stats;
  return rep;
}

double eval_quantized_accuracy(const QuantizedModel& model, const TensorF& images,
                               const TensorI& labels, Index chunk) {
  const Index n = images.dim(0);
  if (labels.numel() != n)
    raise(ErrorCode::ShapeMismatch, "eval_quantized_accuracy: label count mismatch");
  Index hits = 0;
  const Index per = images.numel() / n;
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    TensorF batch({count, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + start * per, images.data() + (start + count) * per,
              batch.data());
    const IntTaps taps = infer_int(model, batch);
    const Index classes = taps.logits.dim(1);
    for (Index r = 0; r < count; ++r) {
      Index best = 0;
      for (Index c = 1; c < classes; ++c)
        if (taps.logits[r * classes + c] > taps.logits[r * classes + best]) best = c;
      if (static_cast<Index>(labels[start + r]) == best) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace rapq
