// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: model architecture, training schedule and the
// OccludedReach environment. Serialized as one JSON document
// {"model": {...}, "train": {...}, "env": {...}}; every leaf can be
// overridden by a dotted key such as "train.lr".

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace ava {

struct ModelConfig {
  std::size_t embed_dim = 32;               // d
  std::size_t ava_dim = 16;                 // d', strictly below d
  std::size_t visual_tokens = 16;           // L_I
  std::size_t max_instruction_tokens = 4;   // L_S upper bound
  std::size_t chunk_len = 4;                // L_c
  std::size_t action_dim = 2;               // D
  std::size_t layers = 4;                   // M
  std::size_t heads = 4;
  std::size_t ffn_hidden = 64;
  std::size_t patch_dim = 48;               // flattened patch length
  std::size_t instruction_vocab = 3;
  std::array<double, 2> gamma = {1.9, 0.1};  // enhance, weaken

  std::size_t action_tokens() const { return chunk_len * action_dim; }  // L_A
  std::size_t position_count() const { return visual_tokens + max_instruction_tokens + action_tokens(); }
  std::size_t head_dim() const { return embed_dim / heads; }
  void validate() const;
};

enum class PenaltyForm { Squared, Absolute };
enum class WindowStart { Uniform, EpisodeStart };

struct TrainConfig {
  std::size_t horizon = 4;  // T
  double penalty_weight = 1.0;  // lambda
  double target_mean_weight = 0.6;  // c
  PenaltyForm penalty_form = PenaltyForm::Squared;
  double lr = 5e-4;
  double min_lr = 1e-6;
  double warmup_frac = 0.10;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t steps = 3000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::vector<std::size_t> detach_boundaries = {2};
  WindowStart window_start = WindowStart::Uniform;
  std::size_t checkpoint_every = 1000;  // 0: final checkpoint only

  std::size_t warmup_steps() const;
  void validate() const;
};

struct EnvConfig {
  std::size_t grid = 16;
  std::size_t patch = 4;
  double max_step = 0.08;
  std::size_t decision_steps = 8;
  std::size_t occlusion_step = 1;
  double success_radius = 0.08;
  std::size_t instructions = 2;
  double target_distance_min = 0.40;
  double target_distance_max = 0.45;
  double spawn_margin = 0.05;
  std::size_t train_episodes = 2000;
  std::size_t eval_episodes = 200;
  std::uint64_t seed = 0;

  std::size_t patches_per_side() const { return grid / patch; }
  std::size_t patch_count() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch * patch * 3; }
  void validate() const;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
  EnvConfig env;

  // Derived model fields (token count, patch width, vocabulary) follow the env.
  void sync_derived();
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const EnvConfig& c);
nlohmann::json to_json(const Config& c);

ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
EnvConfig env_config_from_json(const nlohmann::json& j);
Config config_from_json(const nlohmann::json& j);

Config load_config(const std::string& path);

// Dotted keys of every leaf of the default configuration ("model.embed_dim", ...).
std::vector<std::string> config_keys();

// Applies "key=value" where value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

}  // namespace ava
