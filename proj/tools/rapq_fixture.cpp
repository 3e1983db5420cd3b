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
#include "rapq/error.hpp"
#include "rapq/fixture.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generates the synthetic training fixture: a trained small "
               "residual CNN plus train/calibration/test splits."};
  std::string out = "fixture";
  rapq::FixtureConfig cfg;
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--seed", cfg.seed, "Generation seed")->capture_default_str();
  app.add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
  app.add_option("--train-count", cfg.train_count, "Training sample count")
      ->capture_default_str();
  app.add_option("--gate", cfg.accuracy_gate, "Held-out accuracy gate")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    const rapq::Fixture fx = rapq::generate_fixture(cfg);
    rapq::save_fixture(fx, out);
    std::printf("fixture written to %s\n", out.c_str());
    std::printf("  train %lld  calib %lld  test %lld\n",
                static_cast<long long>(fx.train.count()),
                static_cast<long long>(fx.calib.count()),
                static_cast<long long>(fx.test.count()));
    std::printf("  held-out accuracy %.4f\n", fx.test_accuracy);
    return 0;
  } catch (const rapq::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return e.code() == rapq::ErrorCode::FixtureTraining ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
