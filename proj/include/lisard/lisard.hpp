#pragma once
// Umbrella header.

#include "lisard/attacks.hpp"
#include "lisard/common.hpp"
#include "lisard/config.hpp"
#include "lisard/core.hpp"
#include "lisard/data.hpp"
#include "lisard/evalkit.hpp"
#include "lisard/layers.hpp"
#include "lisard/losses.hpp"
#include "lisard/models.hpp"
#include "lisard/noise.hpp"
#include "lisard/plot.hpp"
#include "lisard/experiment.hpp"
#include "lisard/tensor.hpp"
#include "lisard/trainer.hpp"
