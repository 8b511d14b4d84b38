#pragma once

#include "mrcl/checkpoint.hpp"
#include "mrcl/data.hpp"
#include "mrcl/errors.hpp"
#include "mrcl/evaluation.hpp"
#include "mrcl/layers.hpp"
#include "mrcl/losses.hpp"
#include "mrcl/masking.hpp"
#include "mrcl/optim.hpp"
#include "mrcl/random.hpp"
#include "mrcl/tensor.hpp"
#include "mrcl/trainer.hpp"
#include "mrcl/vit.hpp"
