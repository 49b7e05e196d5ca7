// SPDX-License-Identifier: Apache-2.0
//
// Transformer policy core: input packing, bidirectional pre-norm blocks whose
// attention accepts a soft mask, and the parallel-decoding action head.

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ava/config.h"
#include "ava/nn.h"

namespace ava {

// Packed sequence: visual [0, L_I), language [L_I, L_I+L_S), action
// placeholders [L_I+L_S, L_o). `position_ids[k]` is the positional-embedding
// row used by sequence slot k; `visual_ids` are the original patch indices of
// the visual slots (all patches unless pruned).
struct TokenLayout {
  std::size_t visual_begin = 0;
  std::size_t visual_end = 0;
  std::size_t language_begin = 0;
  std::size_t language_end = 0;
  std::size_t action_begin = 0;
  std::size_t action_end = 0;
  std::vector<std::size_t> position_ids;
  std::vector<std::size_t> visual_ids;

  std::size_t total() const { return action_end; }
  std::size_t visual_count() const { return visual_end - visual_begin; }
  bool is_visual(std::size_t slot) const { return slot >= visual_begin && slot < visual_end; }

  static TokenLayout packed(const ModelConfig& cfg, std::size_t language_tokens);
  // Layout after keeping only the visual slots listed in `kept` (sorted patch ids).
  TokenLayout with_visual_subset(std::span<const std::size_t> kept) const;
};

struct ActionChunk {
  Tensor values;  // [L_c, D], entries in [-1, 1]
};

struct Embedder {
  Linear patch;                   // stands in for the vision encoder
  const Parameter* instruction = nullptr;  // [vocab, d]
  const Parameter* position = nullptr;     // [positions, d]

  static Embedder create(ParamStore& store, const ModelConfig& cfg, Rng& rng);
};

struct EmbeddedInputs {
  Var tokens;  // [L_o, d]
  TokenLayout layout;
};

// Packs visual patches, instruction ids and placeholder rows into one sequence
// and adds positional embeddings to every slot.
EmbeddedInputs embed_inputs(Tape& tape, const Embedder& emb, const ModelConfig& cfg, const Tensor& patches,
                            std::span<const int> instruction, Var placeholder);

// U_ij = 1 if i == j or j is not visual; omega_j otherwise. `omega` has one
// entry per visual slot of `layout`.
Var build_soft_mask(Var omega, const TokenLayout& layout);

// Collects attention matrices of every layer and head, layer-major.
struct AttentionProbe {
  std::vector<Tensor> attention;
};

struct TransformerBlock {
  LayerNorm ln_attn;
  Linear query, key, value, out;
  LayerNorm ln_ffn;
  Mlp ffn;
};

struct Backbone {
  std::vector<TransformerBlock> blocks;
  std::size_t heads = 1;

  static Backbone create(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  // Applies every block with the same mask in every layer and head. A null
  // mask takes the plain softmax path.
  Var forward(Tape& tape, Var tokens, const Var* mask, AttentionProbe* probe = nullptr) const;
};

Var backbone_forward(Tape& tape, const Backbone& backbone, Var tokens, Var mask, AttentionProbe* probe = nullptr);

// Shared per-slot MLP to one scalar, reshaped row-major to [L_c, D], tanh.
struct ActionHead {
  Mlp mlp;
  std::size_t chunk_len = 0;
  std::size_t action_dim = 0;

  static ActionHead create(ParamStore& store, const ModelConfig& cfg, Rng& rng);
  Var operator()(Tape& tape, Var action_hidden) const;
};

}  // namespace ava
