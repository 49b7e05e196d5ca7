// SPDX-License-Identifier: Apache-2.0

#include "ava/recurrence.h"

namespace ava {

const char* to_string(PolicyMode mode) { return mode == PolicyMode::Ava ? "ava" : "baseline"; }

PolicyMode policy_mode_from_string(const std::string& s) {
  if (s == "ava") return PolicyMode::Ava;
  if (s == "baseline") return PolicyMode::Baseline;
  throw ConfigError("mode must be 'baseline' or 'ava', got '" + s + "'");
}

StateExtractor StateExtractor::create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  StateExtractor s;
  s.mlp = Mlp::create(store, "recurrence.state_mlp", cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
  return s;
}

RecurrentState initial_state(Tape& tape, const ModelConfig& cfg) {
  RecurrentState s;
  s.value = tape.constant(Tensor({cfg.action_tokens(), cfg.embed_dim}));
  s.step_index = -1;
  return s;
}

RecurrentState extract_state(Tape& tape, const StateExtractor& extractor, Var action_hidden,
                             const RecurrentState& prev) {
  if (action_hidden.shape() != prev.value.shape()) {
    throw DimensionError("extract_state: hidden " + shape_str(action_hidden.shape()) + " vs state " +
                         shape_str(prev.value.shape()));
  }
  RecurrentState s;
  s.value = extractor.mlp(tape, action_hidden);
  s.step_index = prev.step_index + 1;
  return s;
}

RecurrentState detach_state(const RecurrentState& state) {
  RecurrentState s = state;
  s.value = ops::detach(state.value);
  s.detached = true;
  return s;
}

Var placeholder_for(Tape& tape, PolicyMode mode, const RecurrentState& prev) {
  if (mode == PolicyMode::Ava) return prev.value;
  return tape.constant(Tensor(prev.value.shape()));
}

}  // namespace ava
