#pragma once

#include "lssdiff/error.hpp"
#include "lssdiff/ensembles.hpp"
#include "lssdiff/test_function.hpp"
#include "lssdiff/quadrature.hpp"
#include "lssdiff/spectral.hpp"
#include "lssdiff/mp_law.hpp"
#include "lssdiff/kernels.hpp"
#include "lssdiff/montecarlo.hpp"
#include "lssdiff/io.hpp"
