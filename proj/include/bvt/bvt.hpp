#pragma once

#include "bvt/errors.hpp"
#include "bvt/tensor.hpp"
#include "bvt/ops.hpp"
#include "bvt/random.hpp"
#include "bvt/gradcheck.hpp"
#include "bvt/serialize.hpp"
#include "bvt/layers.hpp"
#include "bvt/bcos.hpp"
#include "bvt/projection.hpp"
#include "bvt/attention.hpp"
#include "bvt/model.hpp"
#include "bvt/trace.hpp"
#include "bvt/checkpoint.hpp"
#include "bvt/image_io.hpp"
#include "bvt/data.hpp"
#include "bvt/training.hpp"
#include "bvt/explain.hpp"
#include "bvt/lrp.hpp"
#include "bvt/cka.hpp"
#include "bvt/config.hpp"
