//==============================================================================
// kamtor.hpp
// Umbrella header: the full solver stack in one include.
//==============================================================================
#pragma once

#include "config.hpp"
#include "field.hpp"
#include "geometry.hpp"
#include "kam.hpp"
#include "lattice.hpp"
#include "linearize.hpp"
#include "measure.hpp"
#include "model.hpp"
#include "nashmoser.hpp"
#include "opmap.hpp"
#include "pipeline.hpp"
#include "rightinv.hpp"
#include "types.hpp"
