#pragma once

// Umbrella header for the whole library.

#include "smartpc/batchnorm.hpp"
#include "smartpc/checkpoint.hpp"
#include "smartpc/config.hpp"
#include "smartpc/corruptions.hpp"
#include "smartpc/csv.hpp"
#include "smartpc/dataset.hpp"
#include "smartpc/errors.hpp"
#include "smartpc/format.hpp"
#include "smartpc/geometry.hpp"
#include "smartpc/gradcheck.hpp"
#include "smartpc/gradcheck_suite.hpp"
#include "smartpc/losses.hpp"
#include "smartpc/model.hpp"
#include "smartpc/ops.hpp"
#include "smartpc/optim.hpp"
#include "smartpc/pipeline.hpp"
#include "smartpc/random.hpp"
#include "smartpc/runtime.hpp"
#include "smartpc/skeleton.hpp"
#include "smartpc/tape.hpp"
#include "smartpc/tensor.hpp"
