#pragma once

// Umbrella header.

#include "vdp/checkpoint.hpp"
#include "vdp/config.hpp"
#include "vdp/data.hpp"
#include "vdp/diffusion.hpp"
#include "vdp/errors.hpp"
#include "vdp/flow.hpp"
#include "vdp/grad_check.hpp"
#include "vdp/metrics.hpp"
#include "vdp/nn.hpp"
#include "vdp/prior.hpp"
#include "vdp/rng.hpp"
#include "vdp/tensor.hpp"
#include "vdp/train.hpp"
#include "vdp/vae.hpp"
