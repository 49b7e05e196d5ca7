// SPDX-License-Identifier: Apache-2.0

#include "ava/envsim.h"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ava {

namespace {

constexpr std::array<std::uint8_t, 3> kAgentColor = {255, 255, 255};
constexpr std::array<std::uint8_t, 3> kDistractorColor = {128, 128, 128};
constexpr std::array<std::array<std::uint8_t, 3>, 4> kTargetColors = {{
    {255, 0, 0},
    {0, 0, 255},
    {0, 255, 0},
    {255, 255, 0},
}};
// Centers of the two fixed distractors, in arena units.
constexpr std::array<Vec2, 2> kDistractors = {{{0.125f, 0.875f}, {0.875f, 0.125f}}};

// Blends a 2x2-pixel square centered at `center` into the image by area coverage.
void draw_square(Image& img, Vec2 center, const std::array<std::uint8_t, 3>& color) {
  const double side = static_cast<double>(img.side);
  const double x0 = center.x * side - 1.0, x1 = center.x * side + 1.0;
  const double y0 = center.y * side - 1.0, y1 = center.y * side + 1.0;
  const auto lo = [](double v) { return static_cast<std::ptrdiff_t>(std::floor(v)); };
  for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, lo(y0));
       r <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(img.side) - 1, lo(y1)); ++r) {
    const double cy = std::max(0.0, std::min<double>(r + 1, y1) - std::max<double>(r, y0));
    if (cy <= 0.0) continue;
    for (std::ptrdiff_t c = std::max<std::ptrdiff_t>(0, lo(x0));
         c <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(img.side) - 1, lo(x1)); ++c) {
      const double cx = std::max(0.0, std::min<double>(c + 1, x1) - std::max<double>(c, x0));
      const double alpha = cx * cy;
      if (alpha <= 0.0) continue;
      std::uint8_t* px = img.rgb.data() + (static_cast<std::size_t>(r) * img.side + static_cast<std::size_t>(c)) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = px[ch] * (1.0 - alpha) + color[ch] * alpha;
        px[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
}

float clampf(float v, float lo, float hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

float chebyshev(Vec2 a, Vec2 b) { return std::max(std::fabs(a.x - b.x), std::fabs(a.y - b.y)); }

std::array<std::uint8_t, 3> target_color(int color) {
  return kTargetColors.at(static_cast<std::size_t>(color));
}

std::vector<int> instruction_tokens(int color) { return {0, 1 + color}; }

Image render(const EnvConfig& cfg, const EnvState& state, std::size_t step) {
  Image img;
  img.side = cfg.grid;
  img.rgb.assign(cfg.grid * cfg.grid * 3, 0);
  for (const auto& d : kDistractors) draw_square(img, d, kDistractorColor);
  if (step < cfg.occlusion_step) draw_square(img, state.target, target_color(state.color));
  draw_square(img, state.agent, kAgentColor);
  return img;
}

Tensor to_patches(const EnvConfig& cfg, const Image& image) {
  const std::size_t pps = cfg.patches_per_side();
  const std::size_t p = cfg.patch;
  Tensor out({pps * pps, p * p * 3});
  for (std::size_t pr = 0; pr < pps; ++pr) {
    for (std::size_t pc = 0; pc < pps; ++pc) {
      double* dst = out.data.data() + (pr * pps + pc) * p * p * 3;
      for (std::size_t r = 0; r < p; ++r) {
        for (std::size_t c = 0; c < p; ++c) {
          const std::size_t src = ((pr * p + r) * image.side + (pc * p + c)) * 3;
          for (std::size_t ch = 0; ch < 3; ++ch) *dst++ = image.rgb[src + ch] / 255.0;
        }
      }
    }
  }
  return out;
}

std::size_t patch_of(const EnvConfig& cfg, Vec2 p) {
  const auto cell = [&](float v) {
    const auto px = static_cast<std::ptrdiff_t>(std::floor(v * static_cast<double>(cfg.grid)));
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(px, 0, static_cast<std::ptrdiff_t>(cfg.grid) - 1));
  };
  return (cell(p.y) / cfg.patch) * cfg.patches_per_side() + cell(p.x) / cfg.patch;
}

Vec2 step_env(const EnvConfig& cfg, Vec2 position, Vec2 displacement) {
  const float m = static_cast<float>(cfg.max_step);
  Vec2 out;
  out.x = clampf(position.x + clampf(displacement.x, -m, m), 0.0f, 1.0f);
  out.y = clampf(position.y + clampf(displacement.y, -m, m), 0.0f, 1.0f);
  return out;
}

Vec2 to_displacement(const EnvConfig& cfg, float ax, float ay) {
  const float m = static_cast<float>(cfg.max_step);
  return Vec2{clampf(ax, -1.0f, 1.0f) * m, clampf(ay, -1.0f, 1.0f) * m};
}

std::vector<float> expert_chunk(const EnvConfig& cfg, Vec2 agent, Vec2 target, std::size_t chunk_len) {
  const float m = static_cast<float>(cfg.max_step);
  std::vector<float> chunk(chunk_len * 2);
  Vec2 pos = agent;
  for (std::size_t k = 0; k < chunk_len; ++k) {
    const float ax = clampf((target.x - pos.x) / m, -1.0f, 1.0f);
    const float ay = clampf((target.y - pos.y) / m, -1.0f, 1.0f);
    chunk[2 * k] = ax;
    chunk[2 * k + 1] = ay;
    pos = step_env(cfg, pos, to_displacement(cfg, ax, ay));
  }
  return chunk;
}

Vec2 execute_chunk(const EnvConfig& cfg, Vec2 agent, std::span<const float> chunk) {
  Vec2 pos = agent;
  for (std::size_t k = 0; k + 1 < chunk.size(); k += 2) {
    pos = step_env(cfg, pos, to_displacement(cfg, chunk[k], chunk[k + 1]));
  }
  return pos;
}

EnvState sample_initial_state(const EnvConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "env.initial_state"));
  const double lo = cfg.spawn_margin, hi = 1.0 - cfg.spawn_margin;
  EnvState s;
  s.color = static_cast<int>(rng.below(cfg.instructions));
  for (;;) {
    s.agent = Vec2{static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi))};
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double dist = rng.uniform(cfg.target_distance_min, cfg.target_distance_max);
      const double other = rng.uniform(-dist, dist);
      const bool along_x = rng.below(2) == 0;
      const double sign = rng.below(2) == 0 ? 1.0 : -1.0;
      const double tx = s.agent.x + (along_x ? sign * dist : other);
      const double ty = s.agent.y + (along_x ? other : sign * dist);
      if (tx < lo || tx > hi || ty < lo || ty > hi) continue;
      s.target = Vec2{static_cast<float>(tx), static_cast<float>(ty)};
      const float d = chebyshev(s.agent, s.target);
      // float rounding can nudge the distance across the range ends
      if (d < static_cast<float>(cfg.target_distance_min) - 1e-6f ||
          d > static_cast<float>(cfg.target_distance_max) + 1e-6f) {
        continue;
      }
      return s;
    }
  }
}

Episode generate_expert_episode(const EnvConfig& cfg, std::uint64_t seed, std::size_t chunk_len) {
  EnvState state = sample_initial_state(cfg, seed);
  Episode ep;
  ep.seed = seed;
  ep.agent_start = state.agent;
  ep.target = state.target;
  ep.color = state.color;
  for (std::size_t t = 0; t < cfg.decision_steps; ++t) {
    DecisionStep step;
    step.agent = state.agent;
    step.image = render(cfg, state, t);
    step.expert = expert_chunk(cfg, state.agent, state.target, chunk_len);
    state.agent = execute_chunk(cfg, state.agent, step.expert);
    ep.steps.push_back(std::move(step));
  }
  return ep;
}

std::uint64_t episode_seed(const EnvConfig& cfg, Split split, std::size_t index) {
  return derive_seed(cfg.seed, split == Split::Train ? "data.train" : "data.eval", index);
}

std::vector<std::uint64_t> split_seeds(const EnvConfig& cfg, Split split, std::size_t count) {
  std::vector<std::uint64_t> seeds;
  seeds.reserve(count);
  if (split == Split::Train) {
    for (std::size_t i = 0; i < count; ++i) seeds.push_back(episode_seed(cfg, Split::Train, i));
    return seeds;
  }
  std::unordered_set<std::uint64_t> train;
  for (std::size_t i = 0; i < cfg.train_episodes; ++i) train.insert(episode_seed(cfg, Split::Train, i));
  for (std::size_t i = 0; seeds.size() < count; ++i) {
    const auto s = episode_seed(cfg, Split::Eval, i);
    if (!train.count(s)) seeds.push_back(s);
  }
  return seeds;
}

PolicyAction ExpertPolicy::act(const EnvState& state, const Image&, std::span<const int>, std::size_t) {
  return PolicyAction{expert_chunk(cfg_, state.agent, state.target, chunk_len_), {}};
}

void RandomPolicy::reset(std::uint64_t episode_seed) {
  rng_ = Rng(derive_seed(seed_, "random_policy", episode_seed));
}

PolicyAction RandomPolicy::act(const EnvState&, const Image&, std::span<const int>, std::size_t) {
  PolicyAction a;
  a.chunk.resize(chunk_len_ * 2);
  for (auto& v : a.chunk) v = static_cast<float>(rng_.uniform(-1.0, 1.0));
  return a;
}

EpisodeResult rollout(EpisodePolicy& policy, const EnvConfig& cfg, std::uint64_t seed) {
  EnvState state = sample_initial_state(cfg, seed);
  const std::vector<int> instr = instruction_tokens(state.color);
  policy.reset(seed);
  EpisodeResult res;
  res.seed = seed;
  res.target = state.target;
  for (std::size_t t = 0; t < cfg.decision_steps; ++t) {
    const Image obs = render(cfg, state, t);
    PolicyAction a = policy.act(state, obs, instr, t);
    if (!a.omega.empty()) res.omega.push_back(std::move(a.omega));
    state.agent = execute_chunk(cfg, state.agent, a.chunk);
  }
  res.final_distance = chebyshev(state.agent, state.target);
  res.success = res.final_distance <= cfg.success_radius;
  return res;
}

}  // namespace ava
