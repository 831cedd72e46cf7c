#pragma once

#include "dyneval/cache.hpp"
#include "dyneval/checkpoint.hpp"
#include "dyneval/data.hpp"
#include "dyneval/dynamic_evaluation.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"
#include "dyneval/numcore.hpp"
#include "dyneval/report.hpp"
#include "dyneval/sparse.hpp"
#include "dyneval/synth.hpp"
#include "dyneval/timescale.hpp"
#include "dyneval/train.hpp"
