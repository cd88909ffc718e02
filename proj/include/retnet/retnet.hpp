#pragma once

#include "retnet/tensor.hpp"
#include "retnet/ops.hpp"
#include "retnet/autodiff.hpp"
#include "retnet/retention.hpp"
#include "retnet/msr.hpp"
#include "retnet/model.hpp"
#include "retnet/train.hpp"
#include "retnet/checkpoint.hpp"
#include "retnet/config.hpp"
#include "retnet/bench.hpp"
