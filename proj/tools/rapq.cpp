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

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "rapq/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Power-of-two post-training quantizer: calibrates, optimizes "
               "weight rounding and scale exponents block by block, searches "
               "activation scales, and verifies the bit-shift integer path."};

  rapq::RunConfig cfg;
  std::string mode = "full";
  std::string grad = "paper";
  bool baseline = false;
  bool ablation = false;

  app.add_option("--model", cfg.model_path, "Model manifest (model.json; weights beside it)")
      ->required();
  app.add_option("--calib", cfg.calib_path, "Calibration image file")->required();
  app.add_option("--out", cfg.out_path, "Quantized model output path")->required();
  app.add_option("--report", cfg.report_path, "Line-delimited JSON report path");
  app.add_option("--wbits", cfg.weight_bits, "Weight bit width")->capture_default_str();
  app.add_option("--abits", cfg.act_bits, "Activation bit width")->capture_default_str();
  app.add_option("--mode", mode, "full or quick")->check(CLI::IsMember({"full", "quick"}))
      ->capture_default_str();
  app.add_option("--iters-weight", cfg.iters_weight,
                 "Weight iterations per unit (0 = mode default)");
  app.add_option("--iters-act", cfg.iters_act,
                 "Activation iterations per unit (0 = mode default)");
  app.add_option("--alpha", cfg.alpha, "Loss-exponent range knob (0 = mode default)");
  app.add_option("--beta", cfg.beta_shift, "Loss-exponent sigmoid shift")
      ->capture_default_str();
  app.add_option("--seed", cfg.seed, "Run seed")->capture_default_str();
  app.add_option("--eval", cfg.eval_path, "Labeled eval set (optional)");
  app.add_flag("--baseline", baseline, "Nearest-rounding power-of-two baseline only");
  app.add_flag("--ablation", ablation, "Run naive, sg_only, and full; print a table");
  app.add_option("--grad-variant", grad, "Clipped-branch scale gradient: paper or derived")
      ->check(CLI::IsMember({"paper", "derived"}))->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  cfg.quick = mode == "quick";
  cfg.grad_variant =
      grad == "derived" ? rapq::GradVariant::Derived : rapq::GradVariant::Paper;

  try {
    if (ablation) {
      const auto rows = rapq::run_ablation(cfg);
      std::printf("%-10s %10s %8s\n", "method", "accuracy", "mean_P");
      for (const auto& row : rows)
        std::printf("%-10s %10.4f %8.2f\n", row.method.c_str(), row.accuracy, row.mean_p);
      return 0;
    }
    const rapq::RunArtifacts art =
        baseline ? rapq::run_baseline(cfg) : rapq::run_quantize(cfg);
    std::printf("quantized model written to %s\n", cfg.out_path.c_str());
    std::printf("  units %zu  act sites %zu  mean P %.2f\n", art.unit_reports.size(),
                art.site_reports.size(), art.mean_p);
    std::printf("  equivalence ok=%d mismatches %lld float multiplies %lld\n",
                art.equivalence.ok ? 1 : 0,
                static_cast<long long>(art.equivalence.mismatches),
                static_cast<long long>(art.equivalence.stats.float_multiplies));
    if (art.eval_accuracy >= 0.0)
      std::printf("  eval accuracy %.4f (fp %.4f)\n", art.eval_accuracy, art.fp_accuracy);
    return 0;
  } catch (const rapq::StageError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
