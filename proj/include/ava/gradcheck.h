// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of the window loss gradient on a small
// configuration, reported per parameter group.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ava/config.h"

namespace ava {

// Four visual tokens, d=16, d'=8, L_c=2, D=2, T=4, detach at boundary 2.
Config micro_config();

struct GroupCheck {
  std::string group;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double tolerance = 1e-4;
  bool passed() const;
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 4e-3;          // finite-difference step, sixth-order stencil
  double tolerance = 1e-4;
  // Test fixture: scales one analytic coordinate before comparison.
  bool corrupt_adjoint = false;
};

// Groups: embed, backbone, ava, recurrence, head, plus "ava_mask_only" which
// repeats the ava group with the penalty weight at 0 so every gradient
// reaches it through the soft mask alone.
GradCheckReport run_grad_check(const Config& cfg, const GradCheckOptions& opts);

}  // namespace ava
