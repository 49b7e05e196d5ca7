// SPDX-License-Identifier: Apache-2.0

#include "ava/pruning.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ava/tensor.h"

namespace ava {

std::size_t PruneSpec::retained_count(std::size_t visual_tokens) const {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("prune ratio must lie in [0, 1)");
  const auto dropped = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(visual_tokens)));
  if (dropped >= visual_tokens) {
    throw ConfigError("prune ratio " + std::to_string(ratio) + " retains no visual token");
  }
  return visual_tokens - dropped;
}

std::vector<std::size_t> select_retained(std::span<const double> omega, const PruneSpec& spec) {
  const std::size_t keep = spec.retained_count(omega.size());
  std::vector<std::size_t> order(omega.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return omega[a] > omega[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

const std::vector<double>& default_prune_ratios() {
  static const std::vector<double> ratios = {0.0, 0.5, 0.6, 0.7, 0.8, 0.9};
  return ratios;
}

}  // namespace ava
