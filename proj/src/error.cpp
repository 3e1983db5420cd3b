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

#include "rapq/error.hpp"

namespace rapq {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
      return "E_INVALID_ARGUMENT";
    case ErrorCode::ShapeMismatch:
      return "E_SHAPE_MISMATCH";
    case ErrorCode::NonFinite:
      return "E_NON_FINITE";
    case ErrorCode::Io:
      return "E_IO";
    case ErrorCode::Magic:
      return "E_MAGIC";
    case ErrorCode::Version:
      return "E_VERSION";
    case ErrorCode::DanglingBlob:
      return "E_DANGLING";
    case ErrorCode::ExtentMismatch:
      return "E_EXTENT";
    case ErrorCode::PayloadRange:
      return "E_PAYLOAD_RANGE";
    case ErrorCode::Overflow:
      return "E_OVERFLOW";
    case ErrorCode::Divergence:
      return "E_DIVERGENCE";
    case ErrorCode::Contract:
      return "E_CONTRACT";
    case ErrorCode::FixtureTraining:
      return "E_FIXTURE_TRAINING";
  }
  return "E_UNKNOWN";
}

}  // namespace rapq
