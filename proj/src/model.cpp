// SPDX-License-Identifier: Apache-2.0

#include "ava/model.h"

#include "ava/rng.h"

namespace ava {

Model::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(init_seed, "init"));
  embedder = Embedder::create(params_, cfg_, rng);
  backbone = Backbone::create(params_, cfg_, rng);
  ava = AvaModule::create(params_, cfg_, rng);
  state = StateExtractor::create(params_, cfg_, rng);
  head = ActionHead::create(params_, cfg_, rng);
}

StepResult Model::step(Tape& tape, const Tensor& patches, std::span<const int> instruction,
                       const RecurrentState& prev, const StepOptions& opts) const {
  const bool ava_mode = opts.mode == PolicyMode::Ava;
  if (opts.prune && opts.prune->ratio > 0.0 && !ava_mode) {
    throw ConfigError("pruning needs soft weights; baseline policies have none");
  }
  Var placeholder = placeholder_for(tape, opts.mode, prev);
  EmbeddedInputs in = embed_inputs(tape, embedder, cfg_, patches, instruction, placeholder);

  StepResult out;
  Var tokens = in.tokens;
  TokenLayout layout = in.layout;
  std::optional<Var> mask;
  if (ava_mode) {
    Var visual = ops::slice_rows(tokens, layout.visual_begin, layout.visual_end);
    Var language = ops::slice_rows(tokens, layout.language_begin, layout.language_end);
    out.weights = compute_soft_weights(tape, ava, visual, language, prev.value, prev.step_index + 1);
    Var omega = out.weights->omega;
    if (opts.forced_omega) omega = tape.constant(Tensor({cfg_.visual_tokens}, *opts.forced_omega));

    if (opts.prune && opts.prune->ratio > 0.0) {
      out.retained = select_retained(omega.value().data, *opts.prune);
      if (opts.prune->mode == PruneMode::SoftZero) {
        Tensor keep({cfg_.visual_tokens});
        for (auto k : out.retained) keep[k] = 1.0;
        omega = ops::mul(omega, tape.constant(std::move(keep)));
      } else {
        std::vector<std::size_t> slots(out.retained.begin(), out.retained.end());
        for (std::size_t s = layout.language_begin; s < layout.action_end; ++s) slots.push_back(s);
        tokens = ops::gather_rows(tokens, slots);
        Var column = ops::reshape(omega, {cfg_.visual_tokens, 1});
        omega = ops::reshape(ops::gather_rows(column, out.retained), {out.retained.size()});
        layout = layout.with_visual_subset(out.retained);
      }
    }
    mask = build_soft_mask(omega, layout);
  }

  out.hidden = backbone.forward(tape, tokens, mask ? &*mask : nullptr, opts.probe);
  out.action_hidden = ops::slice_rows(out.hidden, layout.action_begin, layout.action_end);
  out.chunk = head(tape, out.action_hidden);
  if (ava_mode) out.next = extract_state(tape, state, out.action_hidden, prev);
  out.layout = std::move(layout);
  return out;
}

}  // namespace ava
