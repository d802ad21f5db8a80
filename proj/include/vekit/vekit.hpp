#pragma once

// Umbrella header.

#include "vekit/attention.hpp"
#include "vekit/checkpoint.hpp"
#include "vekit/dataset.hpp"
#include "vekit/errors.hpp"
#include "vekit/image_features.hpp"
#include "vekit/models.hpp"
#include "vekit/numcore.hpp"
#include "vekit/random.hpp"
#include "vekit/text_encoder.hpp"
#include "vekit/training.hpp"
#include "vekit/visualize.hpp"
