// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file: an 8-byte little-endian header length, a JSON header
// {format_version, config, tensors: [{name, shape, offset, frozen}]}, then
// every tensor as little-endian float32 in table order.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "vexpert/model.hpp"

namespace vexpert {

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(std::ostream& out, const Model& model);
void save_checkpoint(const std::string& path, const Model& model);

/// Rebuilds the model from the stored config, then overwrites every tensor.
/// Missing, extra or mis-shaped tensors and offset gaps raise IoError.
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::string& path);

}  // namespace vexpert
