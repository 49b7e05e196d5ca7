// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "ava/evaluation.h"
#include "ava/gradcheck.h"
#include "doctest.h"

using namespace ava;

namespace {

Config small_config() {
  Config c;
  c.model.embed_dim = 16;
  c.model.ava_dim = 8;
  c.model.layers = 2;
  c.model.heads = 2;
  c.model.ffn_hidden = 32;
  c.sync_derived();
  return c;
}

}  // namespace

TEST_CASE("Wilson interval matches hand-computed values") {
  auto [lo, hi] = wilson_interval(140, 200);
  // z = 1.96, p = 0.7, n = 200
  const double z = 1.959963984540054, n = 200, p = 0.7;
  const double centre = (p + z * z / (2 * n)) / (1 + z * z / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n);
  CHECK(lo == doctest::Approx(centre - half).epsilon(1e-12));
  CHECK(hi == doctest::Approx(centre + half).epsilon(1e-12));
  CHECK(lo == doctest::Approx(0.6333).epsilon(1e-3));
  auto [l0, h0] = wilson_interval(0, 10);
  CHECK(l0 == 0.0);
  CHECK(h0 > 0.0);
  auto [l1, h1] = wilson_interval(10, 10);
  CHECK(h1 == doctest::Approx(1.0));
  CHECK(l1 < 1.0);
  auto [le, he] = wilson_interval(0, 0);
  CHECK(le == 0.0);
  CHECK(he == 1.0);
}

TEST_CASE("expert policy solves every eval episode") {
  EnvConfig env;
  const auto seeds = split_seeds(env, Split::Eval, 100);
  const EvalReport rep = evaluate([&] { return std::make_unique<ExpertPolicy>(env, 4); }, env, seeds, 2);
  CHECK(rep.success_rate == 1.0);
  CHECK(rep.episodes.size() == 100);
  CHECK(rep.mean_final_distance <= env.success_radius);
  CHECK(!rep.mean_omega.has_value());
}

TEST_CASE("model evaluation is deterministic and thread-count independent") {
  const Config cfg = small_config();
  Model m(cfg.model, 5);
  const auto seeds = split_seeds(cfg.env, Split::Eval, 6);
  const EvalReport a = evaluate_model(m, PolicyMode::Ava, cfg.env, seeds, {}, 1);
  const EvalReport b = evaluate_model(m, PolicyMode::Ava, cfg.env, seeds, {}, 3);
  CHECK(summary_json(a).dump() == summary_json(b).dump());
  REQUIRE(a.mean_omega.has_value());
  CHECK(*a.mean_omega > 0.1);
  CHECK(*a.mean_omega < 1.9);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    CHECK(a.episodes[i].seed == seeds[i]);
    CHECK(a.episodes[i].final_distance == b.episodes[i].final_distance);
    CHECK(a.episodes[i].mean_omega_per_step.size() == cfg.env.decision_steps);
  }
  const EvalReport base = evaluate_model(m, PolicyMode::Baseline, cfg.env, seeds);
  CHECK(!base.mean_omega.has_value());
}

TEST_CASE("pruned forward keeps the requested visual tokens") {
  const Config cfg = small_config();
  Model m(cfg.model, 2);
  const EnvState s = sample_initial_state(cfg.env, 4);
  const Tensor patches = to_patches(cfg.env, render(cfg.env, s, 0));
  const auto instr = instruction_tokens(s.color);
  const Tensor zero({cfg.model.action_tokens(), cfg.model.embed_dim});
  const PrunedOutput full = pruned_forward(m, patches, instr, zero, -1, std::nullopt);
  CHECK(full.retained.empty());
  CHECK(full.layout.visual_end - full.layout.visual_begin == 16);
  const PrunedOutput hard = pruned_forward(m, patches, instr, zero, -1, PruneSpec{0.9, PruneMode::HardRemove});
  CHECK(hard.retained.size() == 2);
  CHECK(hard.layout.visual_end - hard.layout.visual_begin == 2);
  CHECK(hard.retained == select_retained(full.omega.data, PruneSpec{0.9, PruneMode::HardRemove}));
  const PrunedOutput soft = pruned_forward(m, patches, instr, zero, -1, PruneSpec{0.9, PruneMode::SoftZero});
  double diff = 0.0;
  for (std::size_t i = 0; i < hard.chunk.size(); ++i) diff = std::max(diff, std::fabs(hard.chunk[i] - soft.chunk[i]));
  CHECK(diff < 1e-9);
}

TEST_CASE("weight maps render endpoints as black and white") {
  std::vector<double> omega = {0.1, 1.9, 1.0, 0.0};
  const auto pgm = omega_pgm(omega, 2, {1.9, 0.1});
  const std::string header = "P5\n2 2\n255\n";
  REQUIRE(pgm.size() == header.size() + 4);
  CHECK(std::string(pgm.begin(), pgm.begin() + static_cast<std::ptrdiff_t>(header.size())) == header);
  CHECK(pgm[header.size() + 0] == 0);
  CHECK(pgm[header.size() + 1] == 255);
  CHECK(pgm[header.size() + 2] == 128);
  CHECK(pgm[header.size() + 3] == 0);
  CHECK_THROWS_AS(omega_pgm(omega, 3, {1.9, 0.1}), DimensionError);
}

TEST_CASE("weight map export writes one image per step and a csv") {
  const Config cfg = small_config();
  Model m(cfg.model, 2);
  const auto dir = (std::filesystem::temp_directory_path() / "ava_eval_maps").string();
  std::filesystem::remove_all(dir);
  const std::vector<std::uint64_t> seeds = {11, 12};
  export_weight_maps(m, cfg.env, seeds, dir);
  std::size_t pgms = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) pgms += e.path().extension() == ".pgm";
  CHECK(pgms == seeds.size() * cfg.env.decision_steps);
  std::ifstream csv(dir + "/omega.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 1 + seeds.size() * cfg.env.decision_steps);
}

TEST_CASE("focus rate counts the target patch among the top weights") {
  const Config cfg = small_config();
  Model m(cfg.model, 2);
  const auto seeds = split_seeds(cfg.env, Split::Eval, 20);
  const double all = attention_focus_rate(m, cfg.env, seeds, 16);
  CHECK(all == 1.0);
  const double none = attention_focus_rate(m, cfg.env, seeds, 0);
  CHECK(none == 0.0);
  const double top2 = attention_focus_rate(m, cfg.env, seeds, 2);
  CHECK(top2 >= 0.0);
  CHECK(top2 <= attention_focus_rate(m, cfg.env, seeds, 4));
}

TEST_CASE("eval report files") {
  EnvConfig env;
  const auto seeds = split_seeds(env, Split::Eval, 3);
  const EvalReport rep = evaluate([&] { return std::make_unique<ExpertPolicy>(env, 4); }, env, seeds);
  const auto dir = (std::filesystem::temp_directory_path() / "ava_eval_report").string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_eval_report(rep, dir, "expert", {{"note", "x"}});
  std::ifstream s(dir + "/eval_expert.summary.json");
  const auto j = nlohmann::json::parse(s);
  CHECK(j["success_rate"] == 1.0);
  CHECK(j["note"] == "x");
  std::ifstream l(dir + "/eval_expert.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(l, line)) ++n;
  CHECK(n == 3);
}
