#pragma once

#include "rbnn/autodiff.hpp"
#include "rbnn/checkpoint.hpp"
#include "rbnn/config.hpp"
#include "rbnn/dataset.hpp"
#include "rbnn/image.hpp"
#include "rbnn/inference.hpp"
#include "rbnn/jpeg.hpp"
#include "rbnn/layers.hpp"
#include "rbnn/model.hpp"
#include "rbnn/plot.hpp"
#include "rbnn/resample.hpp"
#include "rbnn/rng.hpp"
#include "rbnn/sweep.hpp"
#include "rbnn/synth.hpp"
#include "rbnn/tensor.hpp"
#include "rbnn/training.hpp"
#include "rbnn/variational.hpp"
