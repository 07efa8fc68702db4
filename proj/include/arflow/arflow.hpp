#pragma once

#include "arflow/checkpoint.hpp"
#include "arflow/cond_reg.hpp"
#include "arflow/config.hpp"
#include "arflow/dataset.hpp"
#include "arflow/errors.hpp"
#include "arflow/image_io.hpp"
#include "arflow/inference.hpp"
#include "arflow/losses.hpp"
#include "arflow/metrics.hpp"
#include "arflow/ops.hpp"
#include "arflow/optim.hpp"
#include "arflow/pyramid.hpp"
#include "arflow/rectified_flow.hpp"
#include "arflow/synth.hpp"
#include "arflow/tape.hpp"
#include "arflow/tensor.hpp"
#include "arflow/trainer.hpp"
#include "arflow/vfield_net.hpp"
