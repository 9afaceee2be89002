#pragma once
#include "ubatrack/evalkit/io.hpp"
#include "ubatrack/evalkit/metrics.hpp"
#include "ubatrack/evalkit/report.hpp"
#include "ubatrack/evalkit/runner.hpp"
