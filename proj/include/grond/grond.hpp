#pragma once

// Umbrella header for the whole library.

#include "grond/abi/abi.hpp"
#include "grond/abi/attack.hpp"
#include "grond/abi/uclc.hpp"
#include "grond/analysis/decouple.hpp"
#include "grond/analysis/metrics.hpp"
#include "grond/analysis/reports.hpp"
#include "grond/analysis/tac.hpp"
#include "grond/data/cifar10.hpp"
#include "grond/data/dataset.hpp"
#include "grond/data/poison.hpp"
#include "grond/data/synthetic.hpp"
#include "grond/defenses/defenses.hpp"
#include "grond/nn/model.hpp"
#include "grond/nn/network.hpp"
#include "grond/nn/snapshot_io.hpp"
#include "grond/nn/train.hpp"
#include "grond/triggers/pgd.hpp"
#include "grond/triggers/trigger.hpp"
#include "grond/triggers/trigger_io.hpp"
