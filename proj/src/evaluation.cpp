// SPDX-License-Identifier: Apache-2.0

#include "ava/evaluation.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ava/parallel.h"

namespace ava {

PrunedOutput pruned_forward(const Model& model, const Tensor& patches, std::span<const int> instruction,
                            const Tensor& prev_state, int prev_step, const std::optional<PruneSpec>& spec) {
  Tape tape(false);
  RecurrentState prev;
  prev.value = tape.constant(prev_state);
  prev.step_index = prev_step;
  StepOptions so;
  so.mode = PolicyMode::Ava;
  so.prune = spec;
  StepResult res = model.step(tape, patches, instruction, prev, so);
  PrunedOutput out;
  out.chunk = res.chunk.value();
  out.next_state = res.next->value.value();
  out.omega = res.weights->omega.value();
  out.hidden = res.hidden.value();
  out.layout = res.layout;
  out.retained = res.retained;
  return out;
}

ModelPolicy::ModelPolicy(const Model& model, const EnvConfig& env, PolicyMode mode, std::optional<PruneSpec> prune)
    : model_(model), env_(env), mode_(mode), prune_(prune) {
  if (prune_ && prune_->ratio > 0.0 && mode_ != PolicyMode::Ava) {
    throw ConfigError("pruning needs soft weights; baseline policies have none");
  }
  if (env_.patch_count() != model.config().visual_tokens || env_.patch_dim() != model.config().patch_dim) {
    throw ConfigError("environment images do not match the model's visual token layout");
  }
  if (prune_) prune_->retained_count(model.config().visual_tokens);
  reset(0);
}

void ModelPolicy::reset(std::uint64_t) {
  state_ = Tensor({model_.config().action_tokens(), model_.config().embed_dim});
  step_index_ = -1;
}

PolicyAction ModelPolicy::act(const EnvState&, const Image& observation, std::span<const int> instruction,
                              std::size_t) {
  const Tensor patches = to_patches(env_, observation);
  PolicyAction a;
  Tensor chunk;
  if (mode_ == PolicyMode::Ava) {
    PrunedOutput out = pruned_forward(model_, patches, instruction, state_, step_index_, prune_);
    chunk = std::move(out.chunk);
    state_ = std::move(out.next_state);
    a.omega = std::move(out.omega.data);
    ++step_index_;
  } else {
    Tape tape(false);
    RecurrentState prev;
    prev.value = tape.constant(state_);
    StepOptions so;
    so.mode = PolicyMode::Baseline;
    chunk = model_.step(tape, patches, instruction, prev, so).chunk.value();
  }
  a.chunk.assign(chunk.data.begin(), chunk.data.end());
  return a;
}

std::pair<double, double> wilson_interval(std::size_t successes, std::size_t trials, double z) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

EvalReport evaluate(const PolicyFactory& make_policy, const EnvConfig& env, const std::vector<std::uint64_t>& seeds,
                    std::size_t threads) {
  EvalReport rep;
  rep.episodes.resize(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) {
    auto policy = make_policy();
    const EpisodeResult r = rollout(*policy, env, seeds[i]);
    EpisodeRecord& rec = rep.episodes[i];
    rec.seed = r.seed;
    rec.success = r.success;
    rec.final_distance = r.final_distance;
    for (const auto& w : r.omega) {
      rec.mean_omega_per_step.push_back(std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size()));
    }
  });
  std::size_t wins = 0;
  double dist = 0.0, omega = 0.0;
  std::size_t omega_steps = 0;
  for (const auto& rec : rep.episodes) {
    wins += rec.success ? 1 : 0;
    dist += rec.final_distance;
    for (double m : rec.mean_omega_per_step) omega += m;
    omega_steps += rec.mean_omega_per_step.size();
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, seeds.size()));
  rep.success_rate = static_cast<double>(wins) / n;
  std::tie(rep.ci_low, rep.ci_high) = wilson_interval(wins, seeds.size());
  rep.mean_final_distance = dist / n;
  if (omega_steps > 0) rep.mean_omega = omega / static_cast<double>(omega_steps);
  return rep;
}

EvalReport evaluate_model(const Model& model, PolicyMode mode, const EnvConfig& env,
                          const std::vector<std::uint64_t>& seeds, const std::optional<PruneSpec>& prune,
                          std::size_t threads) {
  // validates once on the caller's thread
  ModelPolicy probe(model, env, mode, prune);
  return evaluate([&] { return std::make_unique<ModelPolicy>(model, env, mode, prune); }, env, seeds, threads);
}

nlohmann::json summary_json(const EvalReport& report) {
  nlohmann::json j = {{"episodes", report.episodes.size()},
                      {"success_rate", report.success_rate},
                      {"ci_95", {report.ci_low, report.ci_high}},
                      {"mean_final_distance", report.mean_final_distance}};
  if (report.mean_omega) j["mean_omega"] = *report.mean_omega;
  return j;
}

void write_eval_report(const EvalReport& report, const std::string& dir, const std::string& tag,
                       const nlohmann::json& extra) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  const auto jsonl = fs::path(dir) / ("eval_" + tag + ".jsonl");
  std::ofstream out(jsonl, std::ios::trunc);
  if (!out) throw IoError("cannot write " + jsonl.string());
  for (const auto& rec : report.episodes) {
    out << nlohmann::json{{"seed", rec.seed},
                          {"success", rec.success},
                          {"final_distance", rec.final_distance},
                          {"mean_omega_per_step", rec.mean_omega_per_step}}
               .dump()
        << "\n";
  }
  if (!out) throw IoError("write failed: " + jsonl.string());
  nlohmann::json summary = summary_json(report);
  if (extra.is_object()) summary.update(extra);
  const auto path = fs::path(dir) / ("eval_" + tag + ".summary.json");
  std::ofstream s(path, std::ios::trunc);
  s << summary.dump(2) << "\n";
  if (!s) throw IoError("write failed: " + path.string());
}

double attention_focus_rate(const Model& model, const EnvConfig& env, const std::vector<std::uint64_t>& seeds,
                            std::size_t top_k) {
  if (seeds.empty()) return 0.0;
  const Tensor zero({model.config().action_tokens(), model.config().embed_dim});
  std::size_t hits = 0;
  for (auto seed : seeds) {
    const EnvState s = sample_initial_state(env, seed);
    const Tensor patches = to_patches(env, render(env, s, 0));
    const auto instr = instruction_tokens(s.color);
    const PrunedOutput out = pruned_forward(model, patches, instr, zero, -1, std::nullopt);
    const std::size_t target = patch_of(env, s.target);
    // rank of the target patch under the pruning tie rule
    std::size_t above = 0;
    for (std::size_t j = 0; j < out.omega.size(); ++j) {
      if (out.omega[j] > out.omega[target] || (out.omega[j] == out.omega[target] && j < target)) ++above;
    }
    if (above < top_k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(seeds.size());
}

std::vector<std::uint8_t> omega_pgm(std::span<const double> omega, std::size_t side,
                                    const std::array<double, 2>& gamma) {
  if (omega.size() != side * side) throw DimensionError("omega_pgm: weights do not fill the patch grid");
  const std::string header = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const double lo = gamma[1], hi = gamma[0];
  for (double w : omega) {
    const double v = std::clamp((w - lo) / (hi - lo), 0.0, 1.0) * 255.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(v)));
  }
  return out;
}

void export_weight_maps(const Model& model, const EnvConfig& env, const std::vector<std::uint64_t>& seeds,
                        const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  const auto csv_path = fs::path(out_dir) / "omega.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  const std::size_t n = model.config().visual_tokens;
  csv << "episode,step";
  for (std::size_t j = 0; j < n; ++j) csv << ",omega_" << j;
  csv << "\n";
  csv.precision(17);
  for (auto seed : seeds) {
    ModelPolicy policy(model, env, PolicyMode::Ava);
    const EpisodeResult r = rollout(policy, env, seed);
    for (std::size_t t = 0; t < r.omega.size(); ++t) {
      csv << seed << "," << t;
      for (double w : r.omega[t]) csv << "," << w;
      csv << "\n";
      const auto pgm = omega_pgm(r.omega[t], env.patches_per_side(), model.config().gamma);
      const auto path = fs::path(out_dir) / ("omega_ep" + std::to_string(seed) + "_t" + std::to_string(t) + ".pgm");
      std::ofstream img(path, std::ios::binary | std::ios::trunc);
      img.write(reinterpret_cast<const char*>(pgm.data()), static_cast<std::streamsize>(pgm.size()));
      if (!img) throw IoError("write failed: " + path.string());
    }
  }
  if (!csv) throw IoError("write failed: " + csv_path.string());
}

}  // namespace ava
