#pragma once

#include "xnmoe/adam.hpp"
#include "xnmoe/checkpoint.hpp"
#include "xnmoe/config.hpp"
#include "xnmoe/data.hpp"
#include "xnmoe/error.hpp"
#include "xnmoe/extractors.hpp"
#include "xnmoe/functional.hpp"
#include "xnmoe/gradcheck.hpp"
#include "xnmoe/image.hpp"
#include "xnmoe/layers.hpp"
#include "xnmoe/loss.hpp"
#include "xnmoe/metrics.hpp"
#include "xnmoe/model.hpp"
#include "xnmoe/moe.hpp"
#include "xnmoe/ops.hpp"
#include "xnmoe/parameters.hpp"
#include "xnmoe/random.hpp"
#include "xnmoe/shape.hpp"
#include "xnmoe/tensor.hpp"
#include "xnmoe/training.hpp"
