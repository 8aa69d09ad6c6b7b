// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cascade4d/autodiff.hpp"
#include "cascade4d/branch.hpp"
#include "cascade4d/cascade.hpp"
#include "cascade4d/codec.hpp"
#include "cascade4d/commands.hpp"
#include "cascade4d/config.hpp"
#include "cascade4d/denoiser.hpp"
#include "cascade4d/diffusion.hpp"
#include "cascade4d/error.hpp"
#include "cascade4d/eval.hpp"
#include "cascade4d/flow.hpp"
#include "cascade4d/forge.hpp"
#include "cascade4d/gradcheck.hpp"
#include "cascade4d/grid.hpp"
#include "cascade4d/grid_io.hpp"
#include "cascade4d/layers.hpp"
#include "cascade4d/linalg.hpp"
#include "cascade4d/manifest.hpp"
#include "cascade4d/params.hpp"
#include "cascade4d/perceptual.hpp"
#include "cascade4d/render.hpp"
#include "cascade4d/rng.hpp"
#include "cascade4d/scorer.hpp"
#include "cascade4d/selftest.hpp"
#include "cascade4d/tensor.hpp"
#include "cascade4d/trainer.hpp"
