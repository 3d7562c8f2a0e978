#pragma once

#include "iidnet/autodiff/grad_check.hpp"
#include "iidnet/autodiff/layers.hpp"
#include "iidnet/autodiff/ops.hpp"
#include "iidnet/autodiff/param.hpp"
#include "iidnet/autodiff/tensor.hpp"
