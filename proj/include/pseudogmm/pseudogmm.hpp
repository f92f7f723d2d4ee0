#pragma once

// Everything except the command-line front end.

#include "pseudogmm/survival.hpp"
#include "pseudogmm/pseudo.hpp"
#include "pseudogmm/design.hpp"
#include "pseudogmm/correlation.hpp"
#include "pseudogmm/fit_result.hpp"
#include "pseudogmm/gee.hpp"
#include "pseudogmm/gmm.hpp"
#include "pseudogmm/mcmc.hpp"
#include "pseudogmm/bayes_gmm.hpp"
#include "pseudogmm/cox.hpp"
#include "pseudogmm/pem.hpp"
#include "pseudogmm/trial.hpp"
#include "pseudogmm/sim.hpp"
