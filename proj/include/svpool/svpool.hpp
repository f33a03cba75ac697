// Copyright (c) 2026 The svpool Authors
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

// Umbrella header.

#pragma once

#include "svpool/autodiff.hpp"
#include "svpool/batch.hpp"
#include "svpool/config.hpp"
#include "svpool/error.hpp"
#include "svpool/feature_io.hpp"
#include "svpool/grad_check.hpp"
#include "svpool/metrics.hpp"
#include "svpool/model.hpp"
#include "svpool/model_check.hpp"
#include "svpool/objectives.hpp"
#include "svpool/ops.hpp"
#include "svpool/optim.hpp"
#include "svpool/runtime.hpp"
#include "svpool/synth.hpp"
#include "svpool/tensor.hpp"
#include "svpool/text_io.hpp"
#include "svpool/trainer.hpp"
#include "svpool/trials.hpp"
