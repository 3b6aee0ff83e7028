#pragma once

#include "cimq/bitsplit.hpp"
#include "cimq/checkpoint.hpp"
#include "cimq/cim_conv.hpp"
#include "cimq/cli.hpp"
#include "cimq/config.hpp"
#include "cimq/cost_model.hpp"
#include "cimq/dataset.hpp"
#include "cimq/error.hpp"
#include "cimq/quantizer.hpp"
#include "cimq/rng.hpp"
#include "cimq/tensor.hpp"
#include "cimq/tiler.hpp"
#include "cimq/trainer.hpp"
#include "cimq/variation.hpp"
