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

#ifndef RAPQ_FIXTURE_HPP
#define RAPQ_FIXTURE_HPP

#include <cstdint>
#include <string>

#include "rapq/model_io.hpp"

namespace rapq {

/// Desk-scale stand-in for a real vision workload: a 10-class synthetic
/// image task (16x16x1) plus a conv-BN-ReLU stem, one residual block, and a
/// linear head trained on it from scratch. Everything is derived from the
/// seed, so two runs with the same config produce byte-identical artifacts.
struct FixtureConfig {
  std::uint32_t seed = 2026;
  Index classes = 10;
  Index image_hw = 16;
  Index channels = 8;  // stem width

  Index train_count = 4096;
  Index calib_count = 1024;
  Index test_count = 1024;
  float noise_sigma = 0.35f;

  Index epochs = 30;
  Index batch = 64;
  float lr = 0.08f;
  float momentum = 0.9f;

  // Held-out accuracy the trained model must reach; below this the fixture
  // is not trustworthy as a quantization subject and generation fails.
  float accuracy_gate = 0.95f;
};

struct Fixture {
  Model model;  // full-precision, BN statistics intact
  CalibrationSet train;
  CalibrationSet calib;
  CalibrationSet test;
  double test_accuracy = 0.0;
};

Fixture generate_fixture(const FixtureConfig& cfg = {});

/// Writes model.json, model.rapq, train.rapq, calib.rapq, test.rapq.
void save_fixture(const Fixture& fx, const std::string& dir);

}  // namespace rapq

#endif  // RAPQ_FIXTURE_HPP
