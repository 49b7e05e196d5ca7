// SPDX-License-Identifier: Apache-2.0
//
// Recurrent state carried between decision steps: an MLP of the previous
// step's final-layer hidden states at the action placeholder slots.

#pragma once

#include "ava/config.h"
#include "ava/nn.h"

namespace ava {

enum class PolicyMode { Baseline, Ava };

const char* to_string(PolicyMode mode);
PolicyMode policy_mode_from_string(const std::string& s);

struct RecurrentState {
  Var value;            // [L_A, d]
  int step_index = -1;  // -1 for the zero state at episode/window start
  bool detached = false;
};

struct StateExtractor {
  Mlp mlp;  // d -> d -> d, row-wise

  static StateExtractor create(ParamStore& store, const ModelConfig& cfg, Rng& rng);
};

RecurrentState initial_state(Tape& tape, const ModelConfig& cfg);

// `action_hidden` are the final hidden states at the placeholder slots of the
// step that produced `prev`.
RecurrentState extract_state(Tape& tape, const StateExtractor& extractor, Var action_hidden,
                             const RecurrentState& prev);

RecurrentState detach_state(const RecurrentState& state);

// Ava mode feeds the recurrent state as the placeholder rows; baseline feeds zeros.
Var placeholder_for(Tape& tape, PolicyMode mode, const RecurrentState& prev);

}  // namespace ava
