// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "countadapt/common.hpp"

namespace countadapt {

/// Glorot/Xavier uniform: entries ~ U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
/// Every weight tensor in the project (extractor kernels, head, refiner, classifier)
/// is drawn through this one routine from a std::mt19937_64 stream.
void glorot_uniform_fill(std::span<double> out, int fan_in, int fan_out, Rng& rng);

/// rows × cols matrix, fan_in = rows, fan_out = cols.
Matrix glorot_uniform_init(int rows, int cols, std::uint64_t seed);

double glorot_bound(int fan_in, int fan_out);

}  // namespace countadapt
