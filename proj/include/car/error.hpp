// Copyright (c) 2026 CAR contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace car {

// Exit-code families used by the CLI: config 2, io 3, numeric/training 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : NumericError {
  using NumericError::NumericError;
};

struct IndexError : NumericError {
  using NumericError::NumericError;
};

struct TrainingError : NumericError {
  using NumericError::NumericError;
};

// Checkpoint loading failures, kept distinct so callers can tell them apart.
struct BadMagicError : IoError {
  using IoError::IoError;
};

struct TruncatedError : IoError {
  using IoError::IoError;
};

struct DuplicateNameError : IoError {
  using IoError::IoError;
};

}  // namespace car
