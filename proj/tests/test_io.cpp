// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "ava/binio.h"
#include "ava/checkpoint.h"
#include "ava/dataset.h"
#include "ava/gradcheck.h"
#include "ava/pruning.h"
#include "ava/rng.h"
#include "doctest.h"

using namespace ava;

namespace {

std::string temp_path(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("ava_io_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST_CASE("config round-trips through JSON and rejects unknown keys") {
  Config c;
  c.train.lr = 1e-3;
  c.env.grid = 8;
  c.sync_derived();
  const Config back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.model.visual_tokens == 4);
  CHECK_THROWS_AS(config_from_json({{"train", {{"lrr", 1}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"optim", {}}}), ConfigError);
}

TEST_CASE("dotted overrides") {
  nlohmann::json doc = nlohmann::json::object();
  apply_override(doc, "train.lr", "0.002");
  apply_override(doc, "train.detach_boundaries", "[1, 3]");
  apply_override(doc, "train.window_start", "episode_start");
  const Config c = config_from_json(doc);
  CHECK(c.train.lr == 0.002);
  CHECK(c.train.detach_boundaries == std::vector<std::size_t>{1, 3});
  CHECK(c.train.window_start == WindowStart::EpisodeStart);
  CHECK_THROWS_AS(apply_override(doc, "train.nope", "1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "lr", "1"), ConfigError);
  const auto keys = config_keys();
  CHECK(std::find(keys.begin(), keys.end(), "model.embed_dim") != keys.end());
  CHECK(std::find(keys.begin(), keys.end(), "env.occlusion_step") != keys.end());
}

TEST_CASE("config validation") {
  Config c;
  c.train.detach_boundaries = {4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = Config{};
  c.model.ava_dim = c.model.embed_dim;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = Config{};
  c.env.patch = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = Config{};
  c.train.warmup_frac = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(micro_config().validate());
}

TEST_CASE("dataset container round-trips byte for byte") {
  EnvConfig env;
  const Dataset a = generate_dataset(env, 4, Split::Eval, 5);
  const auto bytes = encode_dataset(a);
  const Dataset b = decode_dataset(bytes);
  CHECK(b.split == Split::Eval);
  CHECK(b.chunk_len == 4);
  REQUIRE(b.episodes.size() == 5);
  CHECK(b.episodes[3].target == a.episodes[3].target);
  CHECK(b.episodes[3].steps[2].expert == a.episodes[3].steps[2].expert);
  CHECK(b.episodes[3].steps[0].image.rgb == a.episodes[3].steps[0].image.rgb);
  CHECK(encode_dataset(b) == bytes);
  // header starts with the magic and version
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "AVADATA1");
  CHECK(bytes[8] == kDatasetVersion);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_dataset(truncated), IoError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_dataset(bad), IoError);
  auto future = bytes;
  future[8] = 99;
  CHECK_THROWS_WITH_AS(decode_dataset(future), doctest::Contains("version"), IoError);
}

TEST_CASE("dataset generation is deterministic across thread counts") {
  EnvConfig env;
  env.seed = 7;
  const auto a = encode_dataset(generate_dataset(env, 4, Split::Train, 12, 1));
  const auto b = encode_dataset(generate_dataset(env, 4, Split::Train, 12, 4));
  CHECK(a == b);
  const DatasetStats st = dataset_stats(generate_dataset(env, 4, Split::Train, 50));
  CHECK(st.feasible_rate == 1.0);
  CHECK(st.mean_start_distance >= 0.4);
  CHECK(st.mean_start_distance <= 0.45);
}

TEST_CASE("dataset files and episode export") {
  EnvConfig env;
  const Dataset d = generate_dataset(env, 4, Split::Train, 2);
  const std::string dir = temp_path("data");
  std::filesystem::create_directories(dir);
  save_dataset(d, dir + "/train.bin");
  CHECK(encode_dataset(load_dataset(dir + "/train.bin")) == encode_dataset(d));
  export_episodes(d, dir + "/episodes");
  const auto ep = std::filesystem::path(dir) / "episodes" / ("episode_" + std::to_string(d.episodes[0].seed));
  CHECK(std::filesystem::exists(ep / "meta.json"));
  CHECK(std::filesystem::exists(ep / "actions.csv"));
  CHECK(std::filesystem::file_size(ep / "step_0.ppm") == 13 + 16 * 16 * 3);
  CHECK_THROWS_AS(load_dataset(dir + "/missing.bin"), IoError);
}

TEST_CASE("checkpoints restore every parameter at float32 precision") {
  Config cfg = micro_config();
  cfg.train.seed = 3;
  Model m(cfg.model, 11);
  Checkpoint meta{cfg, PolicyMode::Ava, 42};
  const std::string path = temp_path("ckpt.bin");
  save_checkpoint(m, meta, path);
  const LoadedCheckpoint back = load_checkpoint(path);
  CHECK(back.meta.step == 42);
  CHECK(back.meta.mode == PolicyMode::Ava);
  CHECK(to_json(back.meta.config) == to_json(cfg));
  const auto a = m.params().flatten(), b = back.model.params().flatten();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));
  // saving the restored model reproduces the file
  CHECK(encode_checkpoint(back.model, back.meta) == binio::read_file(path));
}

TEST_CASE("checkpoint corruption is detected") {
  Config cfg = micro_config();
  Model m(cfg.model, 1);
  auto bytes = encode_checkpoint(m, Checkpoint{cfg, PolicyMode::Baseline, 0});
  CHECK(std::string(bytes.begin(), bytes.begin() + 7) == "AVACKPT");
  auto cut = bytes;
  cut.resize(cut.size() / 2);
  CHECK_THROWS_AS(decode_checkpoint(cut), IoError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(extra), IoError);

  // a differently shaped model under the same header is rejected
  Config other = cfg;
  other.model.embed_dim = 24;
  Model wide(other.model, 1);
  const auto wide_bytes = encode_checkpoint(wide, Checkpoint{cfg, PolicyMode::Ava, 0});
  CHECK_THROWS_AS(decode_checkpoint(wide_bytes), ConfigError);
}

TEST_CASE("retained token selection") {
  const std::vector<double> omega = {0.5, 1.8, 0.5, 0.2, 1.1, 0.5};
  CHECK(select_retained(omega, {0.5, PruneMode::HardRemove}) == std::vector<std::size_t>{0, 1, 4});
  // ties keep the lower index
  CHECK(select_retained(omega, {1.0 / 3.0, PruneMode::HardRemove}) == std::vector<std::size_t>{0, 1, 2, 4});
  CHECK(select_retained(omega, {0.0, PruneMode::HardRemove}).size() == 6);
  CHECK_THROWS_AS(select_retained(omega, {1.0, PruneMode::HardRemove}), ConfigError);

  PruneSpec p;
  const std::vector<std::pair<double, std::size_t>> table = {
      {0.0, 16}, {0.5, 8}, {0.6, 7}, {0.7, 5}, {0.8, 4}, {0.9, 2}};
  for (auto [ratio, keep] : table) {
    p.ratio = ratio;
    CHECK(p.retained_count(16) == keep);
  }
}

TEST_CASE("retained sets nest as the ratio grows") {
  Rng rng(9);
  std::vector<double> omega(16);
  for (auto& w : omega) w = rng.uniform(0.1, 1.9);
  omega[3] = omega[7];
  std::vector<std::size_t> prev = select_retained(omega, {0.0, PruneMode::HardRemove});
  for (double r : default_prune_ratios()) {
    const auto cur = select_retained(omega, {r, PruneMode::HardRemove});
    CHECK(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
    prev = cur;
  }
}
