#pragma once

// Convenience header pulling in the whole library.

#include "lvfsr/ablation.hpp"
#include "lvfsr/adam.hpp"
#include "lvfsr/checkpoint.hpp"
#include "lvfsr/error.hpp"
#include "lvfsr/fusion.hpp"
#include "lvfsr/gradcheck.hpp"
#include "lvfsr/gradcheck_suite.hpp"
#include "lvfsr/image_io.hpp"
#include "lvfsr/init.hpp"
#include "lvfsr/metrics.hpp"
#include "lvfsr/network.hpp"
#include "lvfsr/ops.hpp"
#include "lvfsr/priors.hpp"
#include "lvfsr/resample.hpp"
#include "lvfsr/rng.hpp"
#include "lvfsr/synth_data.hpp"
#include "lvfsr/tensor.hpp"
#include "lvfsr/tensor_io.hpp"
#include "lvfsr/training.hpp"
