#pragma once

#include "tomokit/core.hpp"
#include "tomokit/geometry.hpp"
#include "tomokit/io.hpp"
#include "tomokit/metrics.hpp"
#include "tomokit/mmd.hpp"
#include "tomokit/neural_field.hpp"
#include "tomokit/pipeline_dect.hpp"
#include "tomokit/projector.hpp"
#include "tomokit/recon.hpp"
#include "tomokit/spectral.hpp"
#include "tomokit/volume.hpp"
