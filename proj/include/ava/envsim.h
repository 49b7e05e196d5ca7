// SPDX-License-Identifier: Apache-2.0
//
// OccludedReach: a planar reaching task whose target is only rendered during
// the first decision steps. The agent is a white 2x2 square, the target a
// 2x2 square in the instruction's color, and two gray distractors sit at
// fixed places. Objects are drawn with area coverage so sub-pixel positions
// stay visible in the image. Positions live in [0,1]^2; x grows along image
// columns and y along image rows.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "ava/config.h"
#include "ava/rng.h"
#include "ava/tensor.h"

namespace ava {

struct Vec2 {
  float x = 0.0f;
  float y = 0.0f;
  bool operator==(const Vec2&) const = default;
};

float chebyshev(Vec2 a, Vec2 b);

struct EnvState {
  Vec2 agent;
  Vec2 target;
  int color = 0;  // instruction variant, 0-based
};

// Interleaved RGB, grid x grid x 3, row-major.
struct Image {
  std::size_t side = 0;
  std::vector<std::uint8_t> rgb;
};

std::array<std::uint8_t, 3> target_color(int color);

// Instruction token ids: {reach, color}; id 0 is the shared verb.
std::vector<int> instruction_tokens(int color);

Image render(const EnvConfig& cfg, const EnvState& state, std::size_t step);

// [patch_count, patch*patch*3] in [0,1], patches in row-major grid order,
// pixels row-major inside a patch, channels interleaved.
Tensor to_patches(const EnvConfig& cfg, const Image& image);

// Patch index containing a position.
std::size_t patch_of(const EnvConfig& cfg, Vec2 p);

// Displacement is clamped to +-max_step per axis, then the position to [0,1]^2.
Vec2 step_env(const EnvConfig& cfg, Vec2 position, Vec2 displacement);

// Normalized micro-action (in [-1,1], units of max_step) to arena displacement.
Vec2 to_displacement(const EnvConfig& cfg, float ax, float ay);

// L_c micro-actions toward the target, each clipped per axis, simulated forward.
// Returned row-major [L_c, 2] in normalized units.
std::vector<float> expert_chunk(const EnvConfig& cfg, Vec2 agent, Vec2 target, std::size_t chunk_len);

// Applies a normalized [L_c, 2] chunk micro-action by micro-action.
Vec2 execute_chunk(const EnvConfig& cfg, Vec2 agent, std::span<const float> chunk);

struct DecisionStep {
  Vec2 agent;  // state snapshot at the start of the step
  Image image;
  std::vector<float> expert;  // [L_c, 2]
};

struct Episode {
  std::uint64_t seed = 0;
  Vec2 agent_start;
  Vec2 target;
  int color = 0;
  std::vector<DecisionStep> steps;
};

// Initial state drawn from the episode seed: start uniform inside the spawn
// margin, target at Chebyshev distance within the configured range.
EnvState sample_initial_state(const EnvConfig& cfg, std::uint64_t seed);

Episode generate_expert_episode(const EnvConfig& cfg, std::uint64_t seed, std::size_t chunk_len);

enum class Split { Train, Eval };
std::uint64_t episode_seed(const EnvConfig& cfg, Split split, std::size_t index);

// Seeds of a split. Eval seeds never collide with train seeds.
std::vector<std::uint64_t> split_seeds(const EnvConfig& cfg, Split split, std::size_t count);

struct PolicyAction {
  std::vector<float> chunk;    // [L_c, 2] normalized
  std::vector<double> omega;   // soft weights, empty for policies without them
};

// Stateful per-episode policy. `state` is the true environment state; only
// the oracle expert may read the hidden target from it.
class EpisodePolicy {
 public:
  virtual ~EpisodePolicy() = default;
  virtual void reset(std::uint64_t episode_seed) = 0;
  virtual PolicyAction act(const EnvState& state, const Image& observation, std::span<const int> instruction,
                           std::size_t step) = 0;
};

class ExpertPolicy : public EpisodePolicy {
 public:
  ExpertPolicy(const EnvConfig& cfg, std::size_t chunk_len) : cfg_(cfg), chunk_len_(chunk_len) {}
  void reset(std::uint64_t) override {}
  PolicyAction act(const EnvState& state, const Image&, std::span<const int>, std::size_t) override;

 private:
  EnvConfig cfg_;
  std::size_t chunk_len_;
};

class RandomPolicy : public EpisodePolicy {
 public:
  RandomPolicy(std::size_t chunk_len, std::uint64_t seed) : chunk_len_(chunk_len), seed_(seed), rng_(seed) {}
  // Streams restart per episode from (seed, episode seed).
  void reset(std::uint64_t episode_seed) override;
  PolicyAction act(const EnvState&, const Image&, std::span<const int>, std::size_t) override;

 private:
  std::size_t chunk_len_;
  std::uint64_t seed_;
  Rng rng_;
};

struct EpisodeResult {
  std::uint64_t seed = 0;
  bool success = false;
  double final_distance = 0.0;
  std::vector<std::vector<double>> omega;  // per decision step, when the policy has weights
  Vec2 target;
};

EpisodeResult rollout(EpisodePolicy& policy, const EnvConfig& cfg, std::uint64_t seed);

}  // namespace ava
