#pragma once

#include "flowtame/autodiff.hpp"
#include "flowtame/data.hpp"
#include "flowtame/errors.hpp"
#include "flowtame/flow.hpp"
#include "flowtame/io.hpp"
#include "flowtame/metrics.hpp"
#include "flowtame/optim.hpp"
#include "flowtame/random.hpp"
#include "flowtame/tame.hpp"
#include "flowtame/train.hpp"
