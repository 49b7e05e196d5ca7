// SPDX-License-Identifier: Apache-2.0

#include "ava/config.h"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ava/tensor.h"

namespace ava {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid configuration: " + what);
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

void reject_unknown(const json& j, const json& defaults, const std::string& section) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!defaults.contains(k)) throw ConfigError("unknown configuration key: " + section + "." + k);
  }
}

}  // namespace

void ModelConfig::validate() const {
  require(embed_dim > 0 && ava_dim > 0, "model widths must be positive");
  require(ava_dim < embed_dim, "model.ava_dim must be smaller than model.embed_dim");
  require(heads > 0 && embed_dim % heads == 0, "model.embed_dim must be divisible by model.heads");
  require(visual_tokens > 0, "model.visual_tokens must be positive");
  require(max_instruction_tokens > 0, "model.max_instruction_tokens must be positive");
  require(chunk_len > 0 && action_dim > 0, "chunk length and action dim must be positive");
  require(ffn_hidden > 0 && patch_dim > 0 && instruction_vocab > 0, "model sizes must be positive");
  require(gamma[0] > gamma[1] && gamma[1] >= 0.0, "model.gamma must satisfy enhance > weaken >= 0");
}

std::size_t TrainConfig::warmup_steps() const {
  const auto w = static_cast<std::size_t>(warmup_frac * static_cast<double>(steps));
  return std::max<std::size_t>(w, 1);
}

void TrainConfig::validate() const {
  require(horizon >= 1, "train.horizon must be >= 1");
  require(warmup_frac > 0.0 && warmup_frac < 1.0, "train.warmup_frac must lie in (0,1)");
  require(lr > 0.0 && min_lr >= 0.0 && min_lr <= lr, "train.lr / train.min_lr");
  require(grad_clip > 0.0, "train.grad_clip must be positive");
  require(batch_size >= 1, "train.batch_size must be >= 1");
  require(penalty_weight >= 0.0, "train.penalty_weight must be >= 0");
  for (auto b : detach_boundaries) {
    require(b >= 1 && b < horizon, "train.detach_boundaries must lie in [1, horizon-1]");
  }
}

void EnvConfig::validate() const {
  require(grid > 0 && patch > 0 && grid % patch == 0, "env.grid must be divisible by env.patch");
  require(occlusion_step >= 1, "env.occlusion_step must be >= 1");
  require(decision_steps >= 1, "env.decision_steps must be >= 1");
  require(max_step > 0.0, "env.max_step must be positive");
  require(success_radius > 0.0 && success_radius < 1.0, "env.success_radius must lie in (0, 1)");
  require(instructions >= 1 && instructions <= 4, "env.instructions must lie in [1, 4]");
  require(target_distance_min > 0.0 && target_distance_min <= target_distance_max,
          "env target distance range");
  require(spawn_margin >= 0.0 && spawn_margin < 0.5, "env.spawn_margin must lie in [0, 0.5)");
  require(target_distance_max <= 1.0 - 2.0 * spawn_margin, "target distance does not fit in the arena");
}

void Config::sync_derived() {
  model.visual_tokens = env.patch_count();
  model.patch_dim = env.patch_dim();
  model.instruction_vocab = env.instructions + 1;
}

void Config::validate() const {
  model.validate();
  train.validate();
  env.validate();
  require(model.visual_tokens == env.patch_count(), "model.visual_tokens must equal the env patch count");
  require(model.patch_dim == env.patch_dim(), "model.patch_dim must equal the env patch size");
  require(model.instruction_vocab >= env.instructions + 1, "model.instruction_vocab too small");
  require(model.action_dim == 2, "OccludedReach uses planar actions (model.action_dim = 2)");
  require(model.max_instruction_tokens >= 2, "instructions use 2 tokens");
}

json to_json(const ModelConfig& c) {
  return json{{"embed_dim", c.embed_dim},
              {"ava_dim", c.ava_dim},
              {"visual_tokens", c.visual_tokens},
              {"max_instruction_tokens", c.max_instruction_tokens},
              {"chunk_len", c.chunk_len},
              {"action_dim", c.action_dim},
              {"layers", c.layers},
              {"heads", c.heads},
              {"ffn_hidden", c.ffn_hidden},
              {"patch_dim", c.patch_dim},
              {"instruction_vocab", c.instruction_vocab},
              {"gamma", c.gamma}};
}

json to_json(const TrainConfig& c) {
  return json{{"horizon", c.horizon},
              {"penalty_weight", c.penalty_weight},
              {"target_mean_weight", c.target_mean_weight},
              {"penalty_form", c.penalty_form == PenaltyForm::Squared ? "squared" : "absolute"},
              {"lr", c.lr},
              {"min_lr", c.min_lr},
              {"warmup_frac", c.warmup_frac},
              {"grad_clip", c.grad_clip},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"detach_boundaries", c.detach_boundaries},
              {"window_start", c.window_start == WindowStart::Uniform ? "uniform" : "episode_start"},
              {"checkpoint_every", c.checkpoint_every}};
}

json to_json(const EnvConfig& c) {
  return json{{"grid", c.grid},
              {"patch", c.patch},
              {"max_step", c.max_step},
              {"decision_steps", c.decision_steps},
              {"occlusion_step", c.occlusion_step},
              {"success_radius", c.success_radius},
              {"instructions", c.instructions},
              {"target_distance_min", c.target_distance_min},
              {"target_distance_max", c.target_distance_max},
              {"spawn_margin", c.spawn_margin},
              {"train_episodes", c.train_episodes},
              {"eval_episodes", c.eval_episodes},
              {"seed", c.seed}};
}

json to_json(const Config& c) {
  return json{{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"env", to_json(c.env)}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  reject_unknown(j, to_json(c), "model");
  read(j, "embed_dim", c.embed_dim);
  read(j, "ava_dim", c.ava_dim);
  read(j, "visual_tokens", c.visual_tokens);
  read(j, "max_instruction_tokens", c.max_instruction_tokens);
  read(j, "chunk_len", c.chunk_len);
  read(j, "action_dim", c.action_dim);
  read(j, "layers", c.layers);
  read(j, "heads", c.heads);
  read(j, "ffn_hidden", c.ffn_hidden);
  read(j, "patch_dim", c.patch_dim);
  read(j, "instruction_vocab", c.instruction_vocab);
  read(j, "gamma", c.gamma);
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  reject_unknown(j, to_json(c), "train");
  read(j, "horizon", c.horizon);
  read(j, "penalty_weight", c.penalty_weight);
  read(j, "target_mean_weight", c.target_mean_weight);
  std::string form = "squared";
  read(j, "penalty_form", form);
  if (form == "squared") {
    c.penalty_form = PenaltyForm::Squared;
  } else if (form == "absolute") {
    c.penalty_form = PenaltyForm::Absolute;
  } else {
    throw ConfigError("train.penalty_form must be 'squared' or 'absolute'");
  }
  read(j, "lr", c.lr);
  read(j, "min_lr", c.min_lr);
  read(j, "warmup_frac", c.warmup_frac);
  read(j, "grad_clip", c.grad_clip);
  read(j, "weight_decay", c.weight_decay);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "adam_eps", c.adam_eps);
  read(j, "steps", c.steps);
  read(j, "batch_size", c.batch_size);
  read(j, "seed", c.seed);
  read(j, "detach_boundaries", c.detach_boundaries);
  std::string start = "uniform";
  read(j, "window_start", start);
  if (start == "uniform") {
    c.window_start = WindowStart::Uniform;
  } else if (start == "episode_start") {
    c.window_start = WindowStart::EpisodeStart;
  } else {
    throw ConfigError("train.window_start must be 'uniform' or 'episode_start'");
  }
  read(j, "checkpoint_every", c.checkpoint_every);
  return c;
}

EnvConfig env_config_from_json(const json& j) {
  EnvConfig c;
  reject_unknown(j, to_json(c), "env");
  read(j, "grid", c.grid);
  read(j, "patch", c.patch);
  read(j, "max_step", c.max_step);
  read(j, "decision_steps", c.decision_steps);
  read(j, "occlusion_step", c.occlusion_step);
  read(j, "success_radius", c.success_radius);
  read(j, "instructions", c.instructions);
  read(j, "target_distance_min", c.target_distance_min);
  read(j, "target_distance_max", c.target_distance_max);
  read(j, "spawn_margin", c.spawn_margin);
  read(j, "train_episodes", c.train_episodes);
  read(j, "eval_episodes", c.eval_episodes);
  read(j, "seed", c.seed);
  return c;
}

Config config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("configuration root must be an object");
  for (const auto& [k, v] : j.items()) {
    if (k != "model" && k != "train" && k != "env") throw ConfigError("unknown configuration section: " + k);
  }
  Config c;
  if (j.contains("env")) c.env = env_config_from_json(j.at("env"));
  // Derived model fields default from the env unless given explicitly.
  c.sync_derived();
  if (j.contains("model")) {
    json m = to_json(c.model);
    for (const auto& [k, v] : j.at("model").items()) m[k] = v;
    c.model = model_config_from_json(m);
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  const json doc = to_json(Config{});
  for (const auto& [section, body] : doc.items()) {
    for (const auto& [k, v] : body.items()) keys.push_back(section + "." + k);
  }
  return keys;
}

void apply_override(json& doc, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError("override key must be section.field: " + dotted_key);
  const std::string section = dotted_key.substr(0, dot);
  const std::string field = dotted_key.substr(dot + 1);
  const json defaults = to_json(Config{});
  if (!defaults.contains(section) || !defaults.at(section).contains(field)) {
    throw ConfigError("unknown configuration key: " + dotted_key);
  }
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;
  }
  doc[section][field] = parsed;
}

}  // namespace ava
