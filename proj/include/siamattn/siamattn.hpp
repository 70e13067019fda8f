#pragma once

#include "siamattn/attention.hpp"
#include "siamattn/autograd.hpp"
#include "siamattn/backbone.hpp"
#include "siamattn/checkpoint.hpp"
#include "siamattn/config.hpp"
#include "siamattn/conv.hpp"
#include "siamattn/data.hpp"
#include "siamattn/deformable.hpp"
#include "siamattn/error.hpp"
#include "siamattn/experiment.hpp"
#include "siamattn/geometry.hpp"
#include "siamattn/image.hpp"
#include "siamattn/losses.hpp"
#include "siamattn/metrics.hpp"
#include "siamattn/model.hpp"
#include "siamattn/ops.hpp"
#include "siamattn/params.hpp"
#include "siamattn/plot.hpp"
#include "siamattn/refinement.hpp"
#include "siamattn/rpn.hpp"
#include "siamattn/tensor.hpp"
#include "siamattn/tracker.hpp"
#include "siamattn/training.hpp"
