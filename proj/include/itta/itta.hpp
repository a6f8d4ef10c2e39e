#pragma once

#include "itta/array.hpp"
#include "itta/autodiff.hpp"
#include "itta/params.hpp"
#include "itta/nn.hpp"
#include "itta/checkpoint.hpp"
#include "itta/augment.hpp"
#include "itta/objectives.hpp"
#include "itta/data.hpp"
#include "itta/train.hpp"
#include "itta/adapt.hpp"
#include "itta/harness.hpp"
