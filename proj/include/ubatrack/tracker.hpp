#pragma once

#include "ubatrack/tracker/backbone.hpp"
#include "ubatrack/tracker/checkpoint.hpp"
#include "ubatrack/tracker/config.hpp"
#include "ubatrack/tracker/geometry.hpp"
#include "ubatrack/tracker/head.hpp"
#include "ubatrack/tracker/image.hpp"
#include "ubatrack/tracker/model.hpp"
#include "ubatrack/tracker/train.hpp"
