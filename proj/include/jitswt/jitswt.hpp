#pragma once

#include "common.hpp"
#include "input_domain.hpp"
#include "simplex.hpp"
#include "linear_oracle.hpp"
#include "guard_library.hpp"
#include "expr_graph.hpp"
#include "net_compiler.hpp"
#include "jit_engine.hpp"
#include "bnb_driver.hpp"
#include "analysis.hpp"
#include "property_verifier.hpp"
