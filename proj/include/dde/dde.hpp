#pragma once

#include "dde/adam.hpp"
#include "dde/autodiff.hpp"
#include "dde/cert.hpp"
#include "dde/config.hpp"
#include "dde/encoder.hpp"
#include "dde/evaluate.hpp"
#include "dde/factor_data.hpp"
#include "dde/losses.hpp"
#include "dde/ood.hpp"
#include "dde/rng.hpp"
#include "dde/spectral.hpp"
#include "dde/tensor.hpp"
#include "dde/trainer.hpp"
