#pragma once

#include "concentration.hpp"
#include "constants.hpp"
#include "csv.hpp"
#include "experiment.hpp"
#include "geometry.hpp"
#include "model.hpp"
#include "normal.hpp"
#include "parallel.hpp"
#include "penalties.hpp"
#include "rng.hpp"
#include "solver.hpp"
#include "types.hpp"
#include "version.hpp"
