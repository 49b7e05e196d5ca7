// SPDX-License-Identifier: Apache-2.0
//
// Truncated backpropagation through time over windows of consecutive
// decision steps. Each window starts from the zero recurrent state; the state
// handed across a configured boundary is detached from the graph.

#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ava/config.h"
#include "ava/dataset.h"
#include "ava/model.h"

namespace ava {

// Mean absolute difference over all chunk entries.
Var mae_chunk_loss(Var pred, Var gt);

// (mu(omega) - c)^2, or |mu(omega) - c| in the absolute form.
Var weight_penalty(Var omega, double c, PenaltyForm form = PenaltyForm::Squared);

struct WindowStep {
  Tensor patches;            // [L_I, patch_dim]
  std::vector<int> instruction;
  Tensor gt;                 // [L_c, D]
  bool active = true;        // false for padding past the episode end
};

struct Window {
  std::uint64_t episode_seed = 0;
  std::size_t start = 0;
  std::vector<WindowStep> steps;
};

// T consecutive steps from `start`; steps past the end repeat the final step
// with active = false.
Window make_window(const Episode& episode, const EnvConfig& env, std::size_t start, std::size_t horizon);

struct WindowOptions {
  PolicyMode mode = PolicyMode::Ava;
  // Forward-only hooks for gradient checking: state values handed across each
  // detach boundary are written to `record`, or replaced by `inject` (same
  // order) so a finite-difference objective sees them as constants.
  std::vector<Tensor>* record = nullptr;
  const std::vector<Tensor>* inject = nullptr;
};

struct WindowLoss {
  Var total;                      // sum over active steps of mae + lambda * penalty
  std::vector<Var> step_loss;     // per active step
  std::vector<double> step_mae;   // per window step, 0 for inactive steps
  std::vector<double> step_penalty;
  std::vector<double> step_mean_omega;
  std::size_t active_steps = 0;
};

WindowLoss window_loss(Tape& tape, const Model& model, const Window& window, const TrainConfig& cfg,
                       const WindowOptions& opts = {});

// Linear warmup to cfg.lr over warmup_steps, then cosine decay to cfg.min_lr.
double learning_rate(const TrainConfig& cfg, std::size_t step);

// Scales `grad` in place so its L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<double> grad, double max_norm);

// Adam with decoupled weight decay; decay applies to rank-2 tensors only.
class AdamW {
 public:
  AdamW(const ParamStore& params, const TrainConfig& cfg);
  void step(ParamStore& params, std::span<const double> grad, double lr);

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
  std::vector<bool> decay_;
};

struct WindowRef {
  std::size_t episode = 0;
  std::size_t start = 0;
};

// Window drawn for (step, slot) from its own substream of the training seed.
WindowRef sample_window(const TrainConfig& cfg, const Dataset& data, std::size_t step, std::size_t slot);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;           // mean window loss over the batch
  double loss_mae = 0.0;       // mean per active step
  double loss_penalty = 0.0;   // mean per active step, before lambda
  double mean_omega = 1.0;     // mean of mu(omega) over active steps; 1 in baseline mode
  double grad_norm = 0.0;      // before clipping
  double lr = 0.0;
};

nlohmann::json to_json(const StepMetrics& m);

struct TrainOptions {
  PolicyMode mode = PolicyMode::Ava;
  std::string out_dir;        // checkpoints and metrics; empty keeps everything in memory
  std::size_t threads = 1;
  std::ostream* log = nullptr;
  std::size_t log_every = 100;
};

struct TrainResult {
  std::vector<StepMetrics> metrics;
  std::string final_checkpoint;
};

// Baseline mode trains with horizon 1, zero placeholders and no soft mask.
TrainConfig effective_train_config(const TrainConfig& cfg, PolicyMode mode);

// Raises NumericError naming the step and window seeds when the loss or the
// gradient stops being finite.
TrainResult train(Model& model, const Dataset& data, const Config& cfg, const TrainOptions& opts);

}  // namespace ava
