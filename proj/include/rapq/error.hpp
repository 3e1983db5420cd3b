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

#ifndef RAPQ_ERROR_HPP
#define RAPQ_ERROR_HPP

#include <stdexcept>
#include <string>

namespace rapq {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  NonFinite,
  Io,
  Magic,          // E_MAGIC: bad file magic
  Version,        // E_VERSION: unsupported container version
  DanglingBlob,   // E_DANGLING: graph references a tensor the blob lacks
  ExtentMismatch, // E_EXTENT: declared extents disagree with payload size
  PayloadRange,   // quantized payload outside its declared [n, p]
  Overflow,       // integer accumulator overflow
  Divergence,     // optimization produced a non-finite loss
  Contract,       // a hardening/power-of-two contract was violated
  FixtureTraining // fixture failed to reach its accuracy gate
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace rapq

#endif  // RAPQ_ERROR_HPP
