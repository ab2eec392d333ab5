#pragma once

// Umbrella header for the SGTA pose-tracking library.

#include "sgta/beliefmap.hpp"
#include "sgta/errors.hpp"
#include "sgta/experiments.hpp"
#include "sgta/fusion.hpp"
#include "sgta/geometry.hpp"
#include "sgta/json_io.hpp"
#include "sgta/kinematics.hpp"
#include "sgta/metrics.hpp"
#include "sgta/pipeline.hpp"
#include "sgta/rng.hpp"
#include "sgta/simulator.hpp"
#include "sgta/solver.hpp"
