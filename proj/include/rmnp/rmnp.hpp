#pragma once

#include "rmnp/anp.hpp"
#include "rmnp/checkpoint.hpp"
#include "rmnp/dataset.hpp"
#include "rmnp/encoders.hpp"
#include "rmnp/errors.hpp"
#include "rmnp/fusion.hpp"
#include "rmnp/metrics.hpp"
#include "rmnp/modality.hpp"
#include "rmnp/numerics.hpp"
#include "rmnp/objective.hpp"
#include "rmnp/pipeline.hpp"
#include "rmnp/tape.hpp"
