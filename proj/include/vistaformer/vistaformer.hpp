#pragma once
// Umbrella header.

#include "binio.hpp"
#include "checkpoint.hpp"
#include "checks.hpp"
#include "complexity.hpp"
#include "config.hpp"
#include "conv.hpp"
#include "errors.hpp"
#include "flop_counter.hpp"
#include "grad_check.hpp"
#include "layers.hpp"
#include "model.hpp"
#include "model_config.hpp"
#include "model_cost.hpp"
#include "nn_ops.hpp"
#include "sits.hpp"
#include "tensor.hpp"
#include "train.hpp"
