/* Copyright 2026 The qzlm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <stdexcept>
#include <string>

namespace qzlm {

inline constexpr const char* kVersion = "0.1.0";

// Base class for every error thrown by this library.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller mistakes: bad options, invalid model configuration, impossible
// pruning targets. CLI exit class 2.
struct config_error : error {
  using error::error;
};

// Tensor dimension mismatches.
struct shape_error : config_error {
  using config_error::config_error;
};

// Problems with input data: corpora, vocab files, checkpoints. CLI exit
// class 3.
struct data_error : error {
  using error::error;
};

// Checkpoint with a bad magic, unsupported version, or unparseable manifest.
struct format_error : data_error {
  using data_error::data_error;
};

// Checkpoint file shorter than its manifest promises.
struct truncation_error : data_error {
  using data_error::data_error;
};

// Checkpoint whose manifest is internally inconsistent (overlapping or
// out-of-bounds tensors, shape/config mismatches, violated model invariants).
struct layout_error : data_error {
  using data_error::data_error;
};

// Training diverged (non-finite loss). CLI exit class 4.
struct numeric_error : error {
  using error::error;
};

}  // namespace qzlm
