#pragma once

#include "ubatrack/numerics/contract.hpp"
#include "ubatrack/numerics/fft.hpp"
#include "ubatrack/numerics/grad_check.hpp"
#include "ubatrack/numerics/kernels.hpp"
#include "ubatrack/numerics/ops.hpp"
#include "ubatrack/numerics/random.hpp"
#include "ubatrack/numerics/tensor.hpp"
