/*
 * Copyright 2026 The covidcaps Authors
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

#pragma once

#include "covidcaps/autodiff.hpp"
#include "covidcaps/capsule.hpp"
#include "covidcaps/checkpoint.hpp"
#include "covidcaps/data.hpp"
#include "covidcaps/error.hpp"
#include "covidcaps/eval.hpp"
#include "covidcaps/image.hpp"
#include "covidcaps/layers.hpp"
#include "covidcaps/model.hpp"
#include "covidcaps/objective.hpp"
#include "covidcaps/optim.hpp"
#include "covidcaps/tensor.hpp"
#include "covidcaps/trainer.hpp"
