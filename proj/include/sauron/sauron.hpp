#pragma once

#include "sauron/checkpoint.hpp"
#include "sauron/clusterlab.hpp"
#include "sauron/config.hpp"
#include "sauron/dataset.hpp"
#include "sauron/error.hpp"
#include "sauron/flops.hpp"
#include "sauron/losses.hpp"
#include "sauron/metrics.hpp"
#include "sauron/ops.hpp"
#include "sauron/optim.hpp"
#include "sauron/pruner.hpp"
#include "sauron/report.hpp"
#include "sauron/rng.hpp"
#include "sauron/segnet.hpp"
#include "sauron/tensor.hpp"
#include "sauron/trainer.hpp"
