#pragma once

#include "caps/cache_file.hpp"
#include "caps/clients.hpp"
#include "caps/error.hpp"
#include "caps/evaluator.hpp"
#include "caps/feature_matrix.hpp"
#include "caps/hparam_search.hpp"
#include "caps/kernels.hpp"
#include "caps/rng.hpp"
#include "caps/support_builder.hpp"
#include "caps/version.hpp"
