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

#include "llformer/attention.hpp"
#include "llformer/blocks.hpp"
#include "llformer/degrade.hpp"
#include "llformer/errors.hpp"
#include "llformer/imageio.hpp"
#include "llformer/metrics.hpp"
#include "llformer/model.hpp"
#include "llformer/nnops.hpp"
#include "llformer/params.hpp"
#include "llformer/rng.hpp"
#include "llformer/tensor.hpp"
#include "llformer/trainer.hpp"
