#pragma once

#include "histoseg/error.hpp"
#include "histoseg/evaluation.hpp"
#include "histoseg/image.hpp"
#include "histoseg/model.hpp"
#include "histoseg/parallel.hpp"
#include "histoseg/patching.hpp"
#include "histoseg/pipeline.hpp"
#include "histoseg/png_io.hpp"
#include "histoseg/rng.hpp"
#include "histoseg/stain.hpp"
#include "histoseg/tensor.hpp"
#include "histoseg/training.hpp"
