#pragma once

#include "fdiv/bandit.hpp"
#include "fdiv/config.hpp"
#include "fdiv/distribution.hpp"
#include "fdiv/divergence.hpp"
#include "fdiv/dual_solver.hpp"
#include "fdiv/environments.hpp"
#include "fdiv/errors.hpp"
#include "fdiv/harness.hpp"
#include "fdiv/mdp.hpp"
#include "fdiv/oracles.hpp"
#include "fdiv/policy_iteration.hpp"
#include "fdiv/svg.hpp"
