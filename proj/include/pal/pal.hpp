#pragma once

// Umbrella header for the anchor-alignment toolkit.

#include "pal/embedding_io.hpp"
#include "pal/error.hpp"
#include "pal/evaluator.hpp"
#include "pal/grad.hpp"
#include "pal/gradcheck.hpp"
#include "pal/matrix.hpp"
#include "pal/parallel.hpp"
#include "pal/relrep.hpp"
#include "pal/rng.hpp"
#include "pal/trainer.hpp"
#include "pal/version.hpp"
