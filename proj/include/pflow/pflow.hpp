#pragma once

#include "pflow/binary_io.hpp"
#include "pflow/errors.hpp"
#include "pflow/eval.hpp"
#include "pflow/flowmap.hpp"
#include "pflow/label_gen.hpp"
#include "pflow/neighbors.hpp"
#include "pflow/parallel.hpp"
#include "pflow/rng.hpp"
#include "pflow/run_config.hpp"
#include "pflow/score.hpp"
#include "pflow/sde_models.hpp"
#include "pflow/simulate.hpp"
