#pragma once

// Everything: operators, phantom, gating, reconstruction, metrics, pipeline.

#include "emore/config.hpp"
#include "emore/core.hpp"
#include "emore/dataset.hpp"
#include "emore/dataset_io.hpp"
#include "emore/fft.hpp"
#include "emore/gating.hpp"
#include "emore/io.hpp"
#include "emore/metrics.hpp"
#include "emore/operators.hpp"
#include "emore/phantom.hpp"
#include "emore/pipeline.hpp"
#include "emore/recon.hpp"
