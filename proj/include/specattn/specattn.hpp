#pragma once

#include "specattn/attention.hpp"
#include "specattn/harness.hpp"
#include "specattn/layer_map.hpp"
#include "specattn/model.hpp"
#include "specattn/select.hpp"
#include "specattn/spec_decode.hpp"
#include "specattn/tensor.hpp"
#include "specattn/trace.hpp"
#include "specattn/weights_io.hpp"
