// Copyright 2026 The llformer-cpp Authors. All Rights Reserved.
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

#pragma once

#include <stdexcept>
#include <string>

namespace llformer {

/// Shapes or extents that do not conform to an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition on values (not shapes) was violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid model or training configuration. The message lists every violation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unsupported or malformed file contents (PNG, CSV, JSON).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

// Checkpoint load failures. Each kind is a distinct type so callers can
// tell a foreign file from a stale or damaged one.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  CheckpointVersionError(unsigned expected, unsigned found)
      : CheckpointError("checkpoint version mismatch: expected " + std::to_string(expected) +
                        ", found " + std::to_string(found)),
        expected_(expected),
        found_(found) {}
  unsigned expected() const noexcept { return expected_; }
  unsigned found() const noexcept { return found_; }

 private:
  unsigned expected_;
  unsigned found_;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace llformer
