// SPDX-License-Identifier: Apache-2.0
//
// Closed-loop evaluation on held-out seeds, soft-weight-ranked pruning at
// inference time and soft-weight map export.

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ava/envsim.h"
#include "ava/model.h"

namespace ava {

struct PrunedOutput {
  Tensor chunk;                 // [L_c, D]
  Tensor next_state;            // [L_A, d]
  Tensor omega;                 // [L_I], before pruning
  Tensor hidden;                // final hidden states of the executed sequence
  TokenLayout layout;
  std::vector<std::size_t> retained;  // empty when nothing is pruned
};

// One inference step in ava mode. The recurrent state is extracted from the
// pruned pass, the only one executed.
PrunedOutput pruned_forward(const Model& model, const Tensor& patches, std::span<const int> instruction,
                            const Tensor& prev_state, int prev_step, const std::optional<PruneSpec>& spec);

// Runs the model in closed loop; ava mode carries the recurrent state from
// the episode start.
class ModelPolicy : public EpisodePolicy {
 public:
  ModelPolicy(const Model& model, const EnvConfig& env, PolicyMode mode, std::optional<PruneSpec> prune = {});
  void reset(std::uint64_t episode_seed) override;
  PolicyAction act(const EnvState& state, const Image& observation, std::span<const int> instruction,
                   std::size_t step) override;

 private:
  const Model& model_;
  EnvConfig env_;
  PolicyMode mode_;
  std::optional<PruneSpec> prune_;
  Tensor state_;
  int step_index_ = -1;
};

struct EpisodeRecord {
  std::uint64_t seed = 0;
  bool success = false;
  double final_distance = 0.0;
  std::vector<double> mean_omega_per_step;  // empty for policies without soft weights
};

struct EvalReport {
  std::vector<EpisodeRecord> episodes;  // in seed-list order
  double success_rate = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double mean_final_distance = 0.0;
  std::optional<double> mean_omega;  // over all evaluated steps
};

// 95% Wilson score interval.
std::pair<double, double> wilson_interval(std::size_t successes, std::size_t trials, double z = 1.959963984540054);

using PolicyFactory = std::function<std::unique_ptr<EpisodePolicy>()>;

EvalReport evaluate(const PolicyFactory& make_policy, const EnvConfig& env, const std::vector<std::uint64_t>& seeds,
                    std::size_t threads = 1);

EvalReport evaluate_model(const Model& model, PolicyMode mode, const EnvConfig& env,
                          const std::vector<std::uint64_t>& seeds, const std::optional<PruneSpec>& prune = {},
                          std::size_t threads = 1);

nlohmann::json summary_json(const EvalReport& report);

// eval_{tag}.jsonl and eval_{tag}.summary.json under dir.
void write_eval_report(const EvalReport& report, const std::string& dir, const std::string& tag,
                       const nlohmann::json& extra = {});

// Fraction of episodes whose target patch ranks among the top_k soft weights
// at decision step 0.
double attention_focus_rate(const Model& model, const EnvConfig& env, const std::vector<std::uint64_t>& seeds,
                            std::size_t top_k = 2);

// Grayscale P5 image of omega on the patch grid, linearly mapped from
// [gamma_weaken, gamma_enhance] to [0, 255].
std::vector<std::uint8_t> omega_pgm(std::span<const double> omega, std::size_t side, const std::array<double, 2>& gamma);

// omega.csv with rows "episode,step,omega_0,..." plus omega_ep{seed}_t{step}.pgm.
void export_weight_maps(const Model& model, const EnvConfig& env, const std::vector<std::uint64_t>& seeds,
                        const std::string& out_dir);

}  // namespace ava
