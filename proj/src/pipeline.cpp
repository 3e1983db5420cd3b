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

#include "rapq/pipeline.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <utility>

#include "json.hpp"
#include "rapq/blocks.hpp"
#include "rapq/executor.hpp"
#include "rapq/rng.hpp"

namespace rapq {

using nlohmann::json;

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::Config: return "config";
    case Stage::LoadInputs: return "load-inputs";
    case Stage::Fold: return "fold";
    case Stage::Partition: return "partition";
    case Stage::Weights: return "weights";
    case Stage::Acts: return "acts";
    case Stage::Assemble: return "assemble";
    case Stage::Verify: return "verify";
    case Stage::Eval: return "eval";
    case Stage::Write: return "write";
  }
  return "unknown";
}

const char* method_name(Method method) {
  switch (method) {
    case Method::Full: return "full";
    case Method::SgOnly: return "sg_only";
    case Method::Naive: return "naive";
  }
  return "unknown";
}

ResolvedConfig resolve_config(const RunConfig& cfg) {
  auto fail = [](const std::string& m) -> void {
    throw StageError(Stage::Config, ErrorCode::InvalidArgument, m);
  };
  if (cfg.weight_bits < 2 || cfg.weight_bits > 8) fail("weight bits must be in [2, 8]");
  if (cfg.act_bits < 2 || cfg.act_bits > 8) fail("activation bits must be in [2, 8]");
  if (cfg.iters_weight < 0 || cfg.iters_act < 0) fail("iteration counts must be positive");
  if (cfg.batch <= 0) fail("batch must be positive");
  if (cfg.equiv_samples <= 0) fail("equivalence sample count must be positive");

  ResolvedConfig r;
  r.iters_weight = cfg.iters_weight > 0 ? cfg.iters_weight : (cfg.quick ? 20000 : 80000);
  r.iters_act = cfg.iters_act > 0 ? cfg.iters_act : (cfg.quick ? 1000 : 5000);
  r.alpha = cfg.alpha > 0.0 ? cfg.alpha : (cfg.quick ? 0.1 : 0.9);
  r.beta_shift = cfg.beta_shift;
  if (r.iters_weight < 5) fail("weight iterations too small to split into phases");
  if (r.alpha > 1.0) fail("alpha must be in (0, 1]");
  if (!std::isfinite(r.beta_shift)) fail("beta shift must be finite");
  r.iters_scale = r.iters_weight / 5;  // the 20% exponent warm-up
  r.iters_round = r.iters_weight - r.iters_scale;
  return r;
}

namespace {

template <typename F>
auto stage_guard(Stage stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.code(), e.what());
  } catch (const std::exception& e) {
    throw StageError(stage, ErrorCode::Io, e.what());
  }
}

// The graph manifest and its weight blob travel as a pair: model.json next
// to model.rapq.
std::string weights_path_for(const std::string& model_path) {
  std::filesystem::path p(model_path);
  p.replace_extension(".rapq");
  return p.string();
}

// Follows the layer's data input through flatten glue to the activation site
// that feeds it; bias codes are expressed against that site's exponent.
std::string resolve_input_site(const ModelGraph& g, std::string src) {
  while (src != "input" && g.node(src).kind == "flatten") src = g.node(src).inputs.at(0);
  return src;
}

struct LayerStats {
  int input_exponent = 0;
  Index clipped = 0;
  Index rounded_up = 0;
  Index rounded_down = 0;
};

// Fills q_bias for every layer (round(bias / 2^(e_w + e_x)), int32-checked)
// and tallies how the stored codes relate to plain nearest rounding.
std::vector<LayerStats> assemble_bias_and_stats(QuantizedModel& qm, const Model& folded) {
  std::vector<LayerStats> all;
  for (LayerQuant& lq : qm.layers) {
    const GraphNode& node = qm.graph.node(lq.node_id);
    const std::string site = resolve_input_site(qm.graph, node.inputs.at(0));
    if (!qm.has_act(site))
      raise(ErrorCode::Contract,
            "no activation site feeds layer " + lq.node_id + " (resolved to " + site + ")");
    LayerStats st;
    st.input_exponent = qm.act(site).q.exponent;

    const TensorF bias = folded.weights.f32(node.bias);
    const TensorF w = folded.weights.f32(node.weight);
    const Index oc = w.dim(0);
    if (bias.numel() != oc || static_cast<Index>(lq.weight_q.size()) != oc)
      raise(ErrorCode::ShapeMismatch, "layer " + lq.node_id + ": channel counts disagree");

    lq.q_bias = TensorI({oc});
    for (Index c = 0; c < oc; ++c) {
      const int e = lq.weight_q[static_cast<std::size_t>(c)].exponent + st.input_exponent;
      const double qb = std::round(static_cast<double>(bias[c]) / std::ldexp(1.0, e));
      if (std::abs(qb) > static_cast<double>(std::numeric_limits<std::int32_t>::max()))
        raise(ErrorCode::Overflow, "bias code exceeds 32 bits in layer " + lq.node_id);
      lq.q_bias[c] = static_cast<std::int32_t>(qb);
    }

    const Index per = w.numel() / oc;
    for (Index i = 0; i < w.numel(); ++i) {
      const QuantParams& q = lq.weight_q[static_cast<std::size_t>(i / per)];
      const double t = static_cast<double>(w[i]) / q.scale() + q.zero_point;
      const int code = lq.q_weight[i];
      if ((t < q.range_lo && code == q.range_lo) || (t > q.range_hi && code == q.range_hi))
        ++st.clipped;
      else if (code > static_cast<int>(std::floor(t)))
        ++st.rounded_up;
      else
        ++st.rounded_down;
    }
    all.push_back(st);
  }
  return all;
}

TensorF head_rows(const TensorF& images, Index n) {
  Shape s = images.shape();
  s[0] = n;
  TensorF out(std::move(s));
  std::copy(images.data(), images.data() + out.numel(), out.data());
  return out;
}

json config_record(const RunConfig& cfg, const ResolvedConfig& r) {
  return json{{"record", "config"},
              {"method", method_name(cfg.method)},
              {"mode", cfg.quick ? "quick" : "full"},
              {"weight_bits", cfg.weight_bits},
              {"act_bits", cfg.act_bits},
              {"iters_weight", r.iters_weight},
              {"iters_scale", r.iters_scale},
              {"iters_round", r.iters_round},
              {"iters_act", r.iters_act},
              {"alpha", r.alpha},
              {"beta_shift", r.beta_shift},
              {"seed", cfg.seed},
              {"batch", cfg.batch},
              {"grad_variant", cfg.grad_variant == GradVariant::Paper ? "paper" : "derived"},
              {"p_forced_to_2", cfg.method != Method::Full},
              {"model", cfg.model_path},
              {"calib", cfg.calib_path}};
}

void write_lines(const std::vector<std::string>& lines, const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open report path " + path);
  for (const std::string& l : lines) out << l << '\n';
  if (!out) raise(ErrorCode::Io, "short write to " + path);
}

}  // namespace

RunArtifacts run_quantize(const RunConfig& cfg) {
  const ResolvedConfig r = resolve_config(cfg);
  if (cfg.model_path.empty() || cfg.calib_path.empty() || cfg.out_path.empty())
    throw StageError(Stage::Config, ErrorCode::InvalidArgument,
                     "model, calibration, and output paths are required");

  RunArtifacts art;
  std::vector<json> records;
  records.push_back(config_record(cfg, r));

  // ingestion
  auto [model, calib] = stage_guard(Stage::LoadInputs, [&] {
    Model m = load_model(cfg.model_path, weights_path_for(cfg.model_path));
    CalibrationSet c = load_calibration(cfg.calib_path, m.graph.input_shape);
    return std::pair<Model, CalibrationSet>(std::move(m), std::move(c));
  });

  // BN statistics must be read before folding erases the BN nodes
  auto [gammas, folded] = stage_guard(Stage::Fold, [&] {
    std::map<std::string, TensorF> g = bn_gamma_by_producer(model);
    Model f = fold_bn_model(model);
    return std::pair<std::map<std::string, TensorF>, Model>(std::move(g), std::move(f));
  });

  std::vector<BlockUnit> units = stage_guard(Stage::Partition, [&] {
    std::vector<BlockUnit> u = partition_blocks(folded.graph);
    extract_unit_gamma(u, gammas);
    assign_p_values(u, r.alpha, r.beta_shift);
    if (cfg.method != Method::Full)
      for (BlockUnit& b : u) b.p_value = 2.0;
    return u;
  });

  double mean_p = 0.0;
  for (const BlockUnit& u : units) mean_p += u.p_value;
  art.mean_p = units.empty() ? 2.0 : mean_p / static_cast<double>(units.size());

  Rng rng(cfg.seed);

  ReconstructResult recon = stage_guard(Stage::Weights, [&] {
    if (cfg.method == Method::Naive)
      return naive_quantize_weights(folded, units, calib.images, cfg.weight_bits);
    ReconstructConfig rc;
    rc.weight_bits = cfg.weight_bits;
    rc.iters_scale = r.iters_scale;
    rc.iters_round = r.iters_round;
    rc.batch = cfg.batch;
    return reconstruct_weights(folded, units, calib.images, rc, rng);
  });
  art.unit_reports = recon.reports;

  ActQuantResult acts = stage_guard(Stage::Acts, [&] {
    if (cfg.method == Method::Naive)
      return naive_act_scales(folded, units, calib.images, cfg.act_bits);
    ActOptConfig ac;
    ac.act_bits = cfg.act_bits;
    ac.iters = r.iters_act;
    ac.batch = cfg.batch;
    ac.variant = cfg.grad_variant;
    return optimize_act_scales(folded, units, recon.dequant_weights, calib.images, ac, rng);
  });
  art.site_reports = acts.sites;

  std::vector<LayerStats> layer_stats = stage_guard(Stage::Assemble, [&] {
    art.model.graph = folded.graph;
    art.model.weight_bits = cfg.weight_bits;
    art.model.act_bits = cfg.act_bits;
    art.model.bn_folded = true;
    art.model.layers = recon.layers;
    art.model.acts = acts.acts;
    return assemble_bias_and_stats(art.model, folded);
  });

  stage_guard(Stage::Verify, [&] {
    const Index n = std::min(cfg.equiv_samples, calib.images.dim(0));
    art.equivalence = equivalence_check(art.model, head_rows(calib.images, n));
    if (!art.equivalence.ok)
      raise(ErrorCode::Contract,
            "integer path diverged from the quantized simulation at " +
                art.equivalence.first_mismatch_node);
    return 0;
  });

  if (!cfg.eval_path.empty()) {
    stage_guard(Stage::Eval, [&] {
      const CalibrationSet eval = load_calibration(cfg.eval_path, folded.graph.input_shape);
      if (eval.labels.empty())
        raise(ErrorCode::InvalidArgument, "eval set " + cfg.eval_path + " carries no labels");
      TensorI labels({eval.count()});
      for (Index i = 0; i < eval.count(); ++i)
        labels[i] = eval.labels[static_cast<std::size_t>(i)];
      art.eval_accuracy = eval_quantized_accuracy(art.model, eval.images, labels);
      art.fp_accuracy = eval_accuracy(folded, eval.images, eval.labels);
      return 0;
    });
  }

  for (std::size_t i = 0; i < art.unit_reports.size(); ++i) {
    const UnitReport& u = art.unit_reports[i];
    records.push_back(json{{"record", "unit"},
                           {"unit", u.unit_id},
                           {"p_value", u.p_value},
                           {"loss_init", u.loss_init},
                           {"loss_scale_phase", u.loss_scale_phase},
                           {"loss_round_phase", u.loss_round_phase},
                           {"loss_hardened", u.loss_hardened},
                           {"loss_naive", u.loss_naive},
                           {"h1_binary_1e3", u.h1_binary_1e3},
                           {"loose_fraction", u.loose_fraction},
                           {"exponents_in_band", u.exponents_in_band},
                           {"fell_back_to_naive", u.fell_back_to_naive},
                           {"iterations_scale", u.iterations_scale},
                           {"iterations_round", u.iterations_round},
                           {"events", u.events}});
  }
  for (std::size_t i = 0; i < art.model.layers.size(); ++i) {
    const LayerQuant& lq = art.model.layers[i];
    const LayerStats& st = layer_stats[i];
    std::vector<int> exps, zps;
    for (const QuantParams& q : lq.weight_q) {
      exps.push_back(q.exponent);
      zps.push_back(q.zero_point);
    }
    records.push_back(json{{"record", "layer"},
                           {"layer", lq.node_id},
                           {"exponents", exps},
                           {"zero_points", zps},
                           {"input_exponent", st.input_exponent},
                           {"clipped", st.clipped},
                           {"rounded_up", st.rounded_up},
                           {"rounded_down", st.rounded_down}});
  }
  for (const ActSiteReport& s : art.site_reports) {
    records.push_back(json{{"record", "act_site"},
                           {"site", s.node_id},
                           {"unit_index", s.unit_index},
                           {"init_exponent", s.init_exponent},
                           {"final_exponent", s.final_exponent},
                           {"loss_init", s.loss_init},
                           {"loss_best", s.loss_best},
                           {"iterations", s.iterations},
                           {"tuples_tried", s.tuples_tried}});
  }
  records.push_back(json{{"record", "equivalence"},
                         {"ok", art.equivalence.ok},
                         {"mismatches", art.equivalence.mismatches},
                         {"max_abs_dev", art.equivalence.max_abs_dev},
                         {"int_macs", art.equivalence.stats.int_macs},
                         {"shifts", art.equivalence.stats.shifts},
                         {"float_multiplies", art.equivalence.stats.float_multiplies}});
  json summary{{"record", "summary"},
               {"method", method_name(cfg.method)},
               {"mode", cfg.quick ? "quick" : "full"},
               {"weight_bits", cfg.weight_bits},
               {"act_bits", cfg.act_bits},
               {"seed", cfg.seed},
               {"units", units.size()},
               {"act_sites", art.site_reports.size()},
               {"mean_p", art.mean_p},
               {"equivalence_ok", art.equivalence.ok},
               {"float_multiplies", art.equivalence.stats.float_multiplies}};
  if (art.eval_accuracy >= 0.0) {
    summary["accuracy"] = art.eval_accuracy;
    summary["fp_accuracy"] = art.fp_accuracy;
  }
  records.push_back(std::move(summary));

  art.report_lines.reserve(records.size());
  for (const json& rec : records) art.report_lines.push_back(rec.dump());

  stage_guard(Stage::Write, [&] {
    const std::filesystem::path p(cfg.out_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    save_quantized(art.model, cfg.out_path);
    if (!cfg.report_path.empty()) write_lines(art.report_lines, cfg.report_path);
    return 0;
  });

  return art;
}

RunArtifacts run_baseline(RunConfig cfg) {
  cfg.method = Method::Naive;
  return run_quantize(cfg);
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg) {
  resolve_config(cfg);
  if (cfg.eval_path.empty())
    throw StageError(Stage::Config, ErrorCode::InvalidArgument,
                     "ablation needs a labeled eval set");

  std::vector<AblationRow> rows;
  std::vector<std::string> combined;
  for (const Method m : {Method::Naive, Method::SgOnly, Method::Full}) {
    RunConfig c = cfg;
    c.method = m;
    c.out_path = cfg.out_path + "-" + method_name(m);
    c.report_path =
        cfg.report_path.empty() ? "" : cfg.report_path + "-" + method_name(m);
    const RunArtifacts art = run_quantize(c);
    rows.push_back(AblationRow{method_name(m), art.eval_accuracy, art.mean_p});
    combined.push_back(json{{"record", "ablation_row"},
                            {"method", method_name(m)},
                            {"accuracy", art.eval_accuracy},
                            {"fp_accuracy", art.fp_accuracy},
                            {"mean_p", art.mean_p}}
                           .dump());
  }
  if (!cfg.report_path.empty())
    stage_guard(Stage::Write, [&] {
      write_lines(combined, cfg.report_path);
      return 0;
    });
  return rows;
}

}  // namespace rapq
