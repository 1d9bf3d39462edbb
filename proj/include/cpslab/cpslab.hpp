#pragma once

#include "cpslab/augment.hpp"
#include "cpslab/data.hpp"
#include "cpslab/errors.hpp"
#include "cpslab/experiment.hpp"
#include "cpslab/losses.hpp"
#include "cpslab/methods.hpp"
#include "cpslab/metrics.hpp"
#include "cpslab/model.hpp"
#include "cpslab/ops.hpp"
#include "cpslab/optim.hpp"
#include "cpslab/rng.hpp"
#include "cpslab/tensor.hpp"
