// SPDX-License-Identifier: Apache-2.0
//
// Inference-time visual token pruning ranked by soft weights.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ava {

enum class PruneMode { HardRemove, SoftZero };

struct PruneSpec {
  double ratio = 0.0;  // fraction of visual tokens dropped
  PruneMode mode = PruneMode::HardRemove;

  // L_I - floor(ratio * L_I); throws when that is below 1.
  std::size_t retained_count(std::size_t visual_tokens) const;
};

// Indices of the retained_count largest weights, ties toward the lower index,
// returned in ascending index order.
std::vector<std::size_t> select_retained(std::span<const double> omega, const PruneSpec& spec);

const std::vector<double>& default_prune_ratios();

}  // namespace ava
