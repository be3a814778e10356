#ifndef MDGP_MDGP_HPP
#define MDGP_MDGP_HPP

#include "mdgp/error.hpp"
#include "mdgp/linalg.hpp"
#include "mdgp/random.hpp"
#include "mdgp/expfam.hpp"
#include "mdgp/kernels.hpp"
#include "mdgp/likelihood.hpp"
#include "mdgp/inference.hpp"
#include "mdgp/ngd_verify.hpp"
#include "mdgp/tasks.hpp"
#include "mdgp/model.hpp"
#include "mdgp/metrics.hpp"
#include "mdgp/meta.hpp"
#include "mdgp/config.hpp"
#include "mdgp/checkpoint.hpp"
#include "mdgp/verify.hpp"
#include "mdgp/app.hpp"

#endif  // MDGP_MDGP_HPP
