// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header: every library module plus the stage registry and the
// pipeline runner.

#pragma once

#include "tinyxfer/common.hpp"
#include "tinyxfer/model.hpp"
#include "tinyxfer/forward.hpp"
#include "tinyxfer/toy_model.hpp"
#include "tinyxfer/flops.hpp"
#include "tinyxfer/distill.hpp"
#include "tinyxfer/prune.hpp"
#include "tinyxfer/quant.hpp"
#include "tinyxfer/rewards.hpp"
#include "tinyxfer/transfer.hpp"
#include "tinyxfer/retrieval.hpp"
#include "tinyxfer/fixtures.hpp"
#include "tinyxfer/stages.hpp"
#include "tinyxfer/pipeline.hpp"
