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

#ifndef RAPQ_PIPELINE_HPP
#define RAPQ_PIPELINE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "rapq/actquant.hpp"
#include "rapq/error.hpp"
#include "rapq/model_io.hpp"
#include "rapq/reconstruct.hpp"
#include "rapq/shiftinfer.hpp"

namespace rapq {

// Pipeline stages, in execution order. The enum value doubles as the process
// exit code when the stage fails, so scripts can tell failures apart.
enum class Stage {
  Config = 2,
  LoadInputs = 3,
  Fold = 4,
  Partition = 5,
  Weights = 6,
  Acts = 7,
  Assemble = 8,
  Verify = 9,
  Eval = 10,
  Write = 11,
};

const char* stage_name(Stage stage);

class StageError : public Error {
 public:
  StageError(Stage stage, ErrorCode code, const std::string& message)
      : Error(code, std::string(stage_name(stage)) + " stage: " + message),
        stage_(stage) {}

  Stage stage() const { return stage_; }
  int exit_code() const { return static_cast<int>(stage_); }

 private:
  Stage stage_;
};

// naive: nearest-rounding power-of-two baseline, no optimization.
// sg_only: full two-phase optimization but with every unit's loss exponent
//          forced to 2 (plain squared error).
// full: sg_only plus the per-unit loss exponent derived from BN statistics.
enum class Method { Full, SgOnly, Naive };

const char* method_name(Method method);

struct RunConfig {
  std::string model_path;
  std::string calib_path;
  std::string out_path;               // quantized model artifact
  std::string report_path;            // line-delimited JSON; empty skips the file
  std::string eval_path;              // optional labeled set

  int weight_bits = 2;
  int act_bits = 4;
  bool quick = false;                 // full: I_w=80000, I_a=5000, alpha=0.9
                                      // quick: I_w=20000, I_a=1000, alpha=0.1
  Index iters_weight = 0;             // 0 = mode default; scale phase gets 20%
  Index iters_act = 0;                // 0 = mode default
  double alpha = 0.0;                 // 0 = mode default
  double beta_shift = 1.0;
  std::uint32_t seed = 1;
  GradVariant grad_variant = GradVariant::Paper;
  Method method = Method::Full;
  Index batch = 32;
  Index equiv_samples = 256;
};

struct ResolvedConfig {
  Index iters_weight = 0;
  Index iters_scale = 0;  // 20% of iters_weight
  Index iters_round = 0;  // the remainder
  Index iters_act = 0;
  double alpha = 0.0;
  double beta_shift = 1.0;
};

// Fills mode defaults and validates ranges; config errors carry Stage::Config.
ResolvedConfig resolve_config(const RunConfig& cfg);

struct RunArtifacts {
  QuantizedModel model;
  std::vector<UnitReport> unit_reports;
  std::vector<ActSiteReport> site_reports;
  EquivReport equivalence;
  double eval_accuracy = -1.0;  // -1 when no eval set was given
  double fp_accuracy = -1.0;    // FP model on the same eval set
  double mean_p = 2.0;
  std::vector<std::string> report_lines;  // one JSON record per line
};

// Calibrate, partition, optimize weights then activation scales, assemble the
// integer model, verify the bit-shift path, optionally evaluate, write
// artifacts. Deterministic under a fixed config + seed.
RunArtifacts run_quantize(const RunConfig& cfg);

// run_quantize with the method forced to the nearest-rounding baseline.
RunArtifacts run_baseline(RunConfig cfg);

struct AblationRow {
  std::string method;
  double accuracy = 0.0;
  double mean_p = 2.0;
};

// Runs naive, sg_only, and full under the same seed and inputs; requires an
// eval set. Per-method artifacts get "-<method>" appended to the out/report
// paths.
std::vector<AblationRow> run_ablation(const RunConfig& cfg);

}  // namespace rapq

#endif  // RAPQ_PIPELINE_HPP
