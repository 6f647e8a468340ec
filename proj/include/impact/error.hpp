// Copyright 2026 The IMPACT Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef IMPACT_ERROR_HPP
#define IMPACT_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace impact {

enum class ErrorCode {
  kUnreadableFile,
  kUnsupportedEncoding,
  kSilentClip,
  kDegenerateClip,
  kDegenerateBand,
  kWrongDuration,
  kTooShort,
  kShapeMismatch,
  kStructureMismatch,
  kEmptyMask,
  kNonFiniteLoss,
  kClassTooSmall,
  kLengthMismatch,
  kInvalidSpec,
  kIoFailure,
  kUnknownCommand,
  kInvalidConfig,
  kInvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnreadableFile: return "UnreadableFile";
    case ErrorCode::kUnsupportedEncoding: return "UnsupportedEncoding";
    case ErrorCode::kSilentClip: return "SilentClip";
    case ErrorCode::kDegenerateClip: return "DegenerateClip";
    case ErrorCode::kDegenerateBand: return "DegenerateBand";
    case ErrorCode::kWrongDuration: return "WrongDuration";
    case ErrorCode::kTooShort: return "TooShort";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kStructureMismatch: return "StructureMismatch";
    case ErrorCode::kEmptyMask: return "EmptyMask";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kClassTooSmall: return "ClassTooSmall";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kUnknownCommand: return "UnknownCommand";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace impact

#endif  // IMPACT_ERROR_HPP
