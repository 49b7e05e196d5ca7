// SPDX-License-Identifier: Apache-2.0

#include "ava/ava_module.h"

#include <cmath>

namespace ava {

Var film_condition(Tape& tape, const FilmLayer& film, Var visual, Var instruction) {
  if (instruction.rows() == 0) throw DimensionError("film_condition: empty instruction");
  if (visual.cols() != instruction.cols()) {
    throw DimensionError("film_condition: widths " + shape_str(visual.shape()) + " vs " +
                         shape_str(instruction.shape()));
  }
  Var pooled = ops::mean_rows(instruction);
  Var scale = film.scale(tape, pooled);
  Var shift = film.shift(tape, pooled);
  return ops::add_rowvec(ops::mul_rowvec(visual, scale), shift);
}

Var AttentionBlock::operator()(Tape& tape, Var x, Var context, bool self_attention) const {
  Var xq = ln_query(tape, x);
  Var xc = self_attention ? xq : ln_context(tape, context);
  Var q = query(tape, xq);
  Var k = key(tape, xc);
  Var v = value(tape, xc);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Var attn = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), inv_sqrt));
  return ops::add(x, ops::matmul(attn, v));
}

AvaModule AvaModule::create(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.embed_dim, dp = cfg.ava_dim;
  AvaModule m;
  m.visual_mlp = Mlp::create(store, "ava.visual_mlp", d, d, dp, rng);
  m.instruction_mlp = Mlp::create(store, "ava.instruction_mlp", d, d, dp, rng);
  m.state_mlp = Mlp::create(store, "ava.state_mlp", d, d, dp, rng);
  m.film.scale = Linear::create(store, "ava.film.scale", dp, dp, rng);
  m.film.shift = Linear::create(store, "ava.film.shift", dp, dp, rng);
  m.cross.ln_query = LayerNorm::create(store, "ava.cross.ln_query", dp);
  m.cross.ln_context = LayerNorm::create(store, "ava.cross.ln_context", dp);
  m.cross.query = Linear::create(store, "ava.cross.query", dp, dp, rng);
  m.cross.key = Linear::create(store, "ava.cross.key", dp, dp, rng);
  m.cross.value = Linear::create(store, "ava.cross.value", dp, dp, rng);
  m.self.ln_query = LayerNorm::create(store, "ava.self.ln", dp);
  m.self.query = Linear::create(store, "ava.self.query", dp, dp, rng);
  m.self.key = Linear::create(store, "ava.self.key", dp, dp, rng);
  m.self.value = Linear::create(store, "ava.self.value", dp, dp, rng);
  m.ln_ffn = LayerNorm::create(store, "ava.ffn.ln", dp);
  m.ffn = Mlp::create(store, "ava.ffn", dp, 2 * dp, dp, rng);
  m.logits = Linear::create(store, "ava.logits", dp, 2, rng);
  m.gamma = cfg.gamma;
  return m;
}

Var weights_from_rho(Var rho, const std::array<double, 2>& gamma) {
  Var g = rho.tape->constant(Tensor({2, 1}, std::vector<double>{gamma[0], gamma[1]}));
  return ops::reshape(ops::matmul(rho, g), {rho.rows()});
}

SoftWeights compute_soft_weights(Tape& tape, const AvaModule& ava, Var visual, Var instruction, Var prev_state,
                                 int step) {
  Var zi = ava.visual_mlp(tape, visual);
  Var zs = ava.instruction_mlp(tape, instruction);
  Var conditioned = film_condition(tape, ava.film, zi, zs);
  Var state = ava.state_mlp(tape, prev_state);
  Var crossed = ava.cross(tape, conditioned, state, false);
  Var mixed = ava.self(tape, crossed, crossed, true);
  Var hidden = ava.ffn(tape, ava.ln_ffn(tape, mixed));
  SoftWeights w;
  w.rho = ops::softmax_rows(ava.logits(tape, hidden));
  w.omega = weights_from_rho(w.rho, ava.gamma);
  w.step = step;
  return w;
}

}  // namespace ava
