#pragma once

#include "echwr/error.hpp"
#include "echwr/rng.hpp"
#include "echwr/autodiff.hpp"
#include "echwr/nn.hpp"
#include "echwr/text.hpp"
#include "echwr/eval.hpp"
#include "echwr/negatives.hpp"
#include "echwr/data.hpp"
#include "echwr/sensor_model.hpp"
#include "echwr/aux_branch.hpp"
#include "echwr/objectives.hpp"
#include "echwr/bundle.hpp"
#include "echwr/trainer.hpp"
