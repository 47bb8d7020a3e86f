#pragma once

#include "cbit/error.hpp"
#include "cbit/random.hpp"
#include "cbit/tensor.hpp"
#include "cbit/autodiff.hpp"
#include "cbit/data.hpp"
#include "cbit/encoder.hpp"
#include "cbit/checkpoint.hpp"
#include "cbit/objectives.hpp"
#include "cbit/eval.hpp"
#include "cbit/training.hpp"
#include "cbit/run_config.hpp"
