#pragma once

#include "wenc/aggregation.hpp"
#include "wenc/codebook.hpp"
#include "wenc/embedding.hpp"
#include "wenc/error.hpp"
#include "wenc/esvm.hpp"
#include "wenc/esvm_select.hpp"
#include "wenc/evaluation.hpp"
#include "wenc/io.hpp"
#include "wenc/normalization.hpp"
#include "wenc/numerics.hpp"
#include "wenc/pipeline.hpp"
#include "wenc/rng.hpp"
