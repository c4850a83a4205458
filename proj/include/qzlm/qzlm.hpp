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

#include "qzlm/common.hpp"
#include "qzlm/data.hpp"
#include "qzlm/eval.hpp"
#include "qzlm/gates.hpp"
#include "qzlm/grad.hpp"
#include "qzlm/matrix.hpp"
#include "qzlm/model.hpp"
#include "qzlm/pruning.hpp"
#include "qzlm/rng.hpp"
#include "qzlm/sru.hpp"
#include "qzlm/storage.hpp"
#include "qzlm/train.hpp"
