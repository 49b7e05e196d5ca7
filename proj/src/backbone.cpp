// SPDX-License-Identifier: Apache-2.0

#include "ava/backbone.h"

#include <cmath>
#include <string>

namespace ava {

TokenLayout TokenLayout::packed(const ModelConfig& cfg, std::size_t language_tokens) {
  TokenLayout l;
  l.visual_begin = 0;
  l.visual_end = cfg.visual_tokens;
  l.language_begin = l.visual_end;
  l.language_end = l.language_begin + language_tokens;
  l.action_begin = l.language_end;
  l.action_end = l.action_begin + cfg.action_tokens();
  for (std::size_t i = 0; i < cfg.visual_tokens; ++i) {
    l.position_ids.push_back(i);
    l.visual_ids.push_back(i);
  }
  for (std::size_t i = 0; i < language_tokens; ++i) l.position_ids.push_back(cfg.visual_tokens + i);
  // Action slots use fixed positions independent of the instruction length.
  const std::size_t action_pos = cfg.visual_tokens + cfg.max_instruction_tokens;
  for (std::size_t i = 0; i < cfg.action_tokens(); ++i) l.position_ids.push_back(action_pos + i);
  return l;
}

TokenLayout TokenLayout::with_visual_subset(std::span<const std::size_t> kept) const {
  TokenLayout l;
  const std::size_t lang = language_end - language_begin;
  const std::size_t act = action_end - action_begin;
  l.visual_begin = 0;
  l.visual_end = kept.size();
  l.language_begin = l.visual_end;
  l.language_end = l.language_begin + lang;
  l.action_begin = l.language_end;
  l.action_end = l.action_begin + act;
  for (auto k : kept) {
    if (k >= visual_count()) throw DimensionError("visual subset index out of range");
    l.visual_ids.push_back(visual_ids[k]);
    l.position_ids.push_back(position_ids[visual_begin + k]);
  }
  for (std::size_t i = language_begin; i < action_end; ++i) l.position_ids.push_back(position_ids[i]);
  return l;
}

Embedder Embedder::create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  Embedder e;
  e.patch = Linear::create(store, "embed.patch", cfg.patch_dim, cfg.embed_dim, rng);
  e.instruction = &create_table(store, "embed.instruction", cfg.instruction_vocab, cfg.embed_dim, rng);
  e.position = &create_table(store, "embed.position", cfg.position_count(), cfg.embed_dim, rng);
  return e;
}

EmbeddedInputs embed_inputs(Tape& tape, const Embedder& emb, const ModelConfig& cfg, const Tensor& patches,
                            std::span<const int> instruction, Var placeholder) {
  if (patches.rank() != 2 || patches.shape[0] != cfg.visual_tokens || patches.shape[1] != cfg.patch_dim) {
    throw DimensionError("embed_inputs: expected " + std::to_string(cfg.visual_tokens) + " patches of width " +
                         std::to_string(cfg.patch_dim) + ", got " + shape_str(patches.shape));
  }
  if (instruction.empty() || instruction.size() > cfg.max_instruction_tokens) {
    throw DimensionError("embed_inputs: instruction length " + std::to_string(instruction.size()) +
                         " outside [1, " + std::to_string(cfg.max_instruction_tokens) + "]");
  }
  if (placeholder.rows() != cfg.action_tokens() || placeholder.cols() != cfg.embed_dim) {
    throw DimensionError("embed_inputs: placeholder shape " + shape_str(placeholder.shape()));
  }
  std::vector<std::size_t> ids;
  for (int id : instruction) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.instruction_vocab) {
      throw DimensionError("embed_inputs: instruction id " + std::to_string(id) + " out of vocabulary");
    }
    ids.push_back(static_cast<std::size_t>(id));
  }
  EmbeddedInputs out;
  out.layout = TokenLayout::packed(cfg, instruction.size());
  Var visual = emb.patch(tape, tape.constant(patches));
  Var language = ops::gather_rows(tape.param(*emb.instruction), ids);
  const Var parts[] = {visual, language, placeholder};
  Var packed = ops::concat_rows(parts);
  Var pos = ops::gather_rows(tape.param(*emb.position), out.layout.position_ids);
  out.tokens = ops::add(packed, pos);
  return out;
}

Var build_soft_mask(Var omega, const TokenLayout& layout) {
  const std::size_t n = layout.total();
  const std::size_t vb = layout.visual_begin, ve = layout.visual_end;
  const Tensor& w = omega.value();
  if (w.size() != layout.visual_count()) {
    throw DimensionError("build_soft_mask: omega " + shape_str(w.shape) + " vs " +
                         std::to_string(layout.visual_count()) + " visual slots");
  }
  for (double v : w.data) {
    if (!(v >= 0.0)) throw NumericError("build_soft_mask: negative or NaN soft weight");
  }
  Tensor u({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = vb; j < ve; ++j)
      if (i != j) u.data[i * n + j] = w.data[j - vb];
  const std::size_t wid = omega.id;
  return omega.tape->push(std::move(u), {omega}, [wid, n, vb, ve](Tape& t, std::size_t self) {
    auto* gw = t.grad_ptr(wid);
    if (!gw) return;
    const auto& g = *t.grad_ptr(self);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = vb; j < ve; ++j)
        if (i != j) (*gw)[j - vb] += g[i * n + j];
  });
}

Backbone Backbone::create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  Backbone b;
  b.heads = cfg.heads;
  const std::size_t d = cfg.embed_dim;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "backbone.blocks." + std::to_string(i);
    TransformerBlock blk;
    blk.ln_attn = LayerNorm::create(store, p + ".ln_attn", d);
    blk.query = Linear::create(store, p + ".attn.query", d, d, rng);
    blk.key = Linear::create(store, p + ".attn.key", d, d, rng);
    blk.value = Linear::create(store, p + ".attn.value", d, d, rng);
    blk.out = Linear::create(store, p + ".attn.out", d, d, rng);
    blk.ln_ffn = LayerNorm::create(store, p + ".ln_ffn", d);
    blk.ffn = Mlp::create(store, p + ".ffn", d, cfg.ffn_hidden, d, rng);
    b.blocks.push_back(blk);
  }
  return b;
}

Var Backbone::forward(Tape& tape, Var tokens, const Var* mask, AttentionProbe* probe) const {
  const std::size_t n = tokens.rows();
  if (mask && (mask->rows() != n || mask->cols() != n)) {
    throw DimensionError("backbone: mask " + shape_str(mask->shape()) + " does not match sequence of " +
                         std::to_string(n));
  }
  Var x = tokens;
  const std::size_t d = tokens.cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> head_out(heads);
  for (const auto& blk : blocks) {
    Var a = blk.ln_attn(tape, x);
    Var q = ops::scale(blk.query(tape, a), inv_sqrt);
    Var k = blk.key(tape, a);
    Var v = blk.value(tape, a);
    for (std::size_t h = 0; h < heads; ++h) {
      Var qh = heads == 1 ? q : ops::slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = heads == 1 ? k : ops::slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = heads == 1 ? v : ops::slice_cols(v, h * dh, (h + 1) * dh);
      Var scores = ops::matmul_nt(qh, kh);
      Tensor probs;
      Tensor* sink = probe ? &probs : nullptr;
      if (mask) {
        head_out[h] = ops::soft_masked_attention(scores, *mask, vh, sink);
      } else {
        Var attn = ops::softmax_rows(scores);
        if (sink) probs = attn.value();
        head_out[h] = ops::matmul(attn, vh);
      }
      if (probe) probe->attention.push_back(std::move(probs));
    }
    Var merged = heads == 1 ? head_out[0] : ops::concat_cols(head_out);
    x = ops::add(x, blk.out(tape, merged));
    x = ops::add(x, blk.ffn(tape, blk.ln_ffn(tape, x)));
  }
  return x;
}

Var backbone_forward(Tape& tape, const Backbone& backbone, Var tokens, Var mask, AttentionProbe* probe) {
  return backbone.forward(tape, tokens, &mask, probe);
}

ActionHead ActionHead::create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  ActionHead h;
  h.mlp = Mlp::create(store, "head.mlp", cfg.embed_dim, cfg.embed_dim, 1, rng);
  h.chunk_len = cfg.chunk_len;
  h.action_dim = cfg.action_dim;
  return h;
}

Var ActionHead::operator()(Tape& tape, Var action_hidden) const {
  if (action_hidden.rows() != chunk_len * action_dim) {
    throw DimensionError("action_head: expected " + std::to_string(chunk_len * action_dim) +
                         " placeholder rows, got " + shape_str(action_hidden.shape()));
  }
  Var scalars = mlp(tape, action_hidden);  // [L_A, 1]
  return ops::tanh(ops::reshape(scalars, {chunk_len, action_dim}));
}

}  // namespace ava
