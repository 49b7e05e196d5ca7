// SPDX-License-Identifier: Apache-2.0
//
// Active visual attention: scores every visual token from the instruction
// and the recurrent state. Visual features are FiLM-conditioned on the pooled
// instruction, cross-attend to the encoded recurrent state, pass one
// self-attention layer and an FFN, and end in a two-way softmax per token
// (enhance / weaken). The soft weight is the convex combination
// omega_j = rho_j0 * gamma_enhance + rho_j1 * gamma_weaken.

#pragma once

#include <array>

#include "ava/config.h"
#include "ava/nn.h"

namespace ava {

struct SoftWeights {
  Var omega;  // [L_I]
  Var rho;    // [L_I, 2], rows sum to 1
  int step = 0;
};

struct FilmLayer {
  Linear scale;  // F_gamma
  Linear shift;  // F_beta
};

// Pools the instruction features over tokens, then scales and shifts every
// visual row per channel.
Var film_condition(Tape& tape, const FilmLayer& film, Var visual, Var instruction);

// Single-head attention block with pre-layernorm and a residual connection.
// Keys and values come from `context`; pass the query input itself for
// self-attention.
struct AttentionBlock {
  LayerNorm ln_query;
  LayerNorm ln_context;
  Linear query, key, value;

  Var operator()(Tape& tape, Var x, Var context, bool self_attention) const;
};

struct AvaModule {
  Mlp visual_mlp;       // d -> d'
  Mlp instruction_mlp;  // d -> d'
  Mlp state_mlp;        // d -> d'
  FilmLayer film;
  AttentionBlock cross;
  AttentionBlock self;
  LayerNorm ln_ffn;
  Mlp ffn;              // d' -> 2d' -> d'
  Linear logits;        // d' -> 2
  std::array<double, 2> gamma = {1.9, 0.1};

  static AvaModule create(ParamStore& store, const ModelConfig& cfg, Rng& rng);
};

SoftWeights compute_soft_weights(Tape& tape, const AvaModule& ava, Var visual, Var instruction, Var prev_state,
                                 int step = 0);

// omega = rho * gamma for a given rho (rows on the probability simplex).
Var weights_from_rho(Var rho, const std::array<double, 2>& gamma);

}  // namespace ava
