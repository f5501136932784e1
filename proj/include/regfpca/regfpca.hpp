#pragma once

#include "regfpca/error.hpp"
#include "regfpca/parallel.hpp"
#include "regfpca/funcdata.hpp"
#include "regfpca/bspline.hpp"
#include "regfpca/expfam.hpp"
#include "regfpca/constropt.hpp"
#include "regfpca/registration.hpp"
#include "regfpca/gfpca.hpp"
#include "regfpca/joint.hpp"
#include "regfpca/simbench.hpp"
