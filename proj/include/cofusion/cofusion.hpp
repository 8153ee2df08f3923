#pragma once

#include "cofusion/datasim.hpp"
#include "cofusion/error.hpp"
#include "cofusion/gradcheck.hpp"
#include "cofusion/io.hpp"
#include "cofusion/metrics.hpp"
#include "cofusion/model.hpp"
#include "cofusion/objective.hpp"
#include "cofusion/ops.hpp"
#include "cofusion/rng.hpp"
#include "cofusion/tensor.hpp"
