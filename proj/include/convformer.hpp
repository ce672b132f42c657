#pragma once

#include "convformer/error.hpp"
#include "convformer/rng.hpp"
#include "convformer/tensor.hpp"
#include "convformer/nnops.hpp"
#include "convformer/graph.hpp"
#include "convformer/autodiff.hpp"
#include "convformer/mca.hpp"
#include "convformer/backbone.hpp"
#include "convformer/format.hpp"
#include "convformer/accounting.hpp"
#include "convformer/config_io.hpp"
#include "convformer/checkpoint.hpp"
#include "convformer/gradcheck_suite.hpp"
#include "convformer/train.hpp"
#include "convformer/cli.hpp"
