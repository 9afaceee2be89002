#pragma once
#include "ubatrack/harness/checks.hpp"
#include "ubatrack/harness/cli.hpp"
#include "ubatrack/harness/netpbm.hpp"
#include "ubatrack/harness/synth.hpp"
#include "ubatrack/harness/training.hpp"
