#pragma once

#include "hyrsm/core.hpp"
#include "hyrsm/autograd.hpp"
#include "hyrsm/metric.hpp"
#include "hyrsm/relation.hpp"
#include "hyrsm/losses.hpp"
#include "hyrsm/data.hpp"
#include "hyrsm/episodes.hpp"
#include "hyrsm/training.hpp"
