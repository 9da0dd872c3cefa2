// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "depthmaster/ablation.hpp"
#include "depthmaster/checkpoint.hpp"
#include "depthmaster/config.hpp"
#include "depthmaster/dataio.hpp"
#include "depthmaster/denoiser.hpp"
#include "depthmaster/feature_alignment.hpp"
#include "depthmaster/latent_codec.hpp"
#include "depthmaster/losses.hpp"
#include "depthmaster/metrics.hpp"
#include "depthmaster/optim.hpp"
#include "depthmaster/plot.hpp"
#include "depthmaster/preprocess.hpp"
#include "depthmaster/runtime.hpp"
#include "depthmaster/trainer.hpp"
