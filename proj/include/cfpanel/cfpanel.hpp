#pragma once

#include "cfpanel/config.hpp"
#include "cfpanel/controls.hpp"
#include "cfpanel/csv.hpp"
#include "cfpanel/errors.hpp"
#include "cfpanel/estimator.hpp"
#include "cfpanel/gfunc.hpp"
#include "cfpanel/linalg.hpp"
#include "cfpanel/panel.hpp"
#include "cfpanel/parallel.hpp"
#include "cfpanel/pipeline.hpp"
#include "cfpanel/rng.hpp"
#include "cfpanel/sieve.hpp"
#include "cfpanel/simlab.hpp"
