#pragma once

#include "scaleadapt/adapt.hpp"
#include "scaleadapt/checkpoint.hpp"
#include "scaleadapt/data.hpp"
#include "scaleadapt/model.hpp"
#include "scaleadapt/objective.hpp"
#include "scaleadapt/rng.hpp"
#include "scaleadapt/scalespace.hpp"
#include "scaleadapt/tensor.hpp"
#include "scaleadapt/train.hpp"
