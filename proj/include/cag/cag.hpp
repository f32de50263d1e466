#pragma once

#include "cag/checkpoint.hpp"
#include "cag/decoder.hpp"
#include "cag/gradcheck.hpp"
#include "cag/graph.hpp"
#include "cag/log.hpp"
#include "cag/model.hpp"
#include "cag/rng.hpp"
#include "cag/synthdial.hpp"
#include "cag/tensor.hpp"
#include "cag/text.hpp"
#include "cag/trace.hpp"
#include "cag/train.hpp"
