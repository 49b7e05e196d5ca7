// SPDX-License-Identifier: Apache-2.0
//
// The full policy: embedding, AVA soft weights, soft-masked backbone, action
// head and recurrent-state extraction, composed into one decision step.

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ava/ava_module.h"
#include "ava/backbone.h"
#include "ava/pruning.h"
#include "ava/recurrence.h"

namespace ava {

struct StepOptions {
  PolicyMode mode = PolicyMode::Ava;
  // Replaces every soft weight by this constant (ava mode only).
  std::optional<double> forced_omega;
  std::optional<PruneSpec> prune;
  AttentionProbe* probe = nullptr;
};

struct StepResult {
  Var chunk;          // [L_c, D]
  Var hidden;         // final hidden states, [L_o, d]
  Var action_hidden;  // [L_A, d]
  std::optional<SoftWeights> weights;  // ava mode
  std::optional<RecurrentState> next;  // ava mode
  TokenLayout layout;
  std::vector<std::size_t> retained;   // kept patch ids when pruning
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  StepResult step(Tape& tape, const Tensor& patches, std::span<const int> instruction, const RecurrentState& prev,
                  const StepOptions& opts) const;

  Embedder embedder;
  Backbone backbone;
  AvaModule ava;
  StateExtractor state;
  ActionHead head;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace ava
