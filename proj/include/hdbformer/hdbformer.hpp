#pragma once

#include "hdbformer/config.hpp"
#include "hdbformer/data.hpp"
#include "hdbformer/encoders.hpp"
#include "hdbformer/errors.hpp"
#include "hdbformer/gradcheck.hpp"
#include "hdbformer/io.hpp"
#include "hdbformer/layers.hpp"
#include "hdbformer/metrics.hpp"
#include "hdbformer/miim.hpp"
#include "hdbformer/nn.hpp"
#include "hdbformer/ops.hpp"
#include "hdbformer/optim.hpp"
#include "hdbformer/param_store.hpp"
#include "hdbformer/profiler.hpp"
#include "hdbformer/segmodel.hpp"
#include "hdbformer/tensor.hpp"
#include "hdbformer/train.hpp"
