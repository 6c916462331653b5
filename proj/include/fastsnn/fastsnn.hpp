#pragma once

/// Umbrella header: quantized networks, conversion to spiking networks, simulation and fine-tuning.

#include "fastsnn/calibrate.hpp"
#include "fastsnn/dataset.hpp"
#include "fastsnn/finetune.hpp"
#include "fastsnn/fold.hpp"
#include "fastsnn/forward.hpp"
#include "fastsnn/network.hpp"
#include "fastsnn/neuron.hpp"
#include "fastsnn/optim.hpp"
#include "fastsnn/quant.hpp"
#include "fastsnn/serialize.hpp"
#include "fastsnn/simulate.hpp"
#include "fastsnn/spiking.hpp"
#include "fastsnn/tensor.hpp"
#include "fastsnn/train.hpp"
