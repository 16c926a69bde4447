
#ifndef _GPIR_
#define _GPIR_

#include "gpir/error.hpp"
#include "gpir/config.hpp"
#include "gpir/sphere_geom.hpp"
#include "gpir/kernels.hpp"
#include "gpir/vecchia.hpp"
#include "gpir/model_core.hpp"
#include "gpir/draws.hpp"
#include "gpir/hmc.hpp"
#include "gpir/gibbs.hpp"
#include "gpir/samplers.hpp"
#include "gpir/bobyqa.hpp"
#include "gpir/hyperparam.hpp"
#include "gpir/inference.hpp"
#include "gpir/gof.hpp"
#include "gpir/io.hpp"
#include "gpir/simulation.hpp"
#include "gpir/comparators.hpp"
#include "gpir/study.hpp"

#endif  // _GPIR_
