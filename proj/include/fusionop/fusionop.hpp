#pragma once

#include "fusionop/tensor.hpp"
#include "fusionop/rng.hpp"
#include "fusionop/dsl.hpp"
#include "fusionop/graph.hpp"
#include "fusionop/oracle.hpp"
#include "fusionop/trainer.hpp"
#include "fusionop/search.hpp"
