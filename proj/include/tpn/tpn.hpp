#pragma once

#include "tpn/adam.hpp"
#include "tpn/adaptation_losses.hpp"
#include "tpn/autodiff.hpp"
#include "tpn/checkpoint.hpp"
#include "tpn/datasets.hpp"
#include "tpn/embedding_net.hpp"
#include "tpn/error.hpp"
#include "tpn/experiment.hpp"
#include "tpn/gradient_suite.hpp"
#include "tpn/prototypical.hpp"
#include "tpn/rng.hpp"
#include "tpn/tensor.hpp"
#include "tpn/trainer.hpp"
