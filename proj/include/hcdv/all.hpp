#pragma once

#include "hcdv/core.hpp"
#include "hcdv/dataset.hpp"
#include "hcdv/embedding.hpp"
#include "hcdv/utility.hpp"
#include "hcdv/encoder.hpp"
#include "hcdv/hierarchy.hpp"
#include "hcdv/shapley.hpp"
#include "hcdv/hcdv.hpp"
#include "hcdv/streaming.hpp"
#include "hcdv/eval.hpp"
