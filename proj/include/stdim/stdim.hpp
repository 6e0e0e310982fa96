// Copyright 2026 The stdim Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "stdim/datapipe.hpp"
#include "stdim/harness.hpp"
#include "stdim/layers.hpp"
#include "stdim/metrics.hpp"
#include "stdim/model.hpp"
#include "stdim/objective.hpp"
#include "stdim/optim.hpp"
#include "stdim/random.hpp"
#include "stdim/simgen.hpp"
#include "stdim/tensor_file.hpp"
#include "stdim/training.hpp"
#include "stdim/types.hpp"
