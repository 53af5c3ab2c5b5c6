#pragma once

#include "focalpyr/errors.hpp"
#include "focalpyr/random.hpp"
#include "focalpyr/tensor.hpp"
#include "focalpyr/ops.hpp"
#include "focalpyr/nn.hpp"
#include "focalpyr/codec.hpp"
#include "focalpyr/losses.hpp"
#include "focalpyr/owm.hpp"
#include "focalpyr/pyramid.hpp"
#include "focalpyr/distill.hpp"
#include "focalpyr/data.hpp"
#include "focalpyr/harness.hpp"
