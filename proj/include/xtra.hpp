// Copyright 2026 The xtra Authors
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

// Umbrella header.

#pragma once

#include "xtra/alignment.hpp"
#include "xtra/augment.hpp"
#include "xtra/checkpoint.hpp"
#include "xtra/config.hpp"
#include "xtra/data.hpp"
#include "xtra/errors.hpp"
#include "xtra/gradcheck.hpp"
#include "xtra/index.hpp"
#include "xtra/layers.hpp"
#include "xtra/metrics.hpp"
#include "xtra/numerics.hpp"
#include "xtra/provenance.hpp"
#include "xtra/tasks.hpp"
