// SPDX-License-Identifier: Apache-2.0

#include "ava/dataset.h"

#include <filesystem>
#include <fstream>

#include "ava/binio.h"
#include "ava/parallel.h"

namespace ava {

namespace {

constexpr char kMagic[8] = {'A', 'V', 'A', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kActionDim = 2;

}  // namespace

Dataset generate_dataset(const EnvConfig& env, std::size_t chunk_len, Split split, std::size_t count,
                         std::size_t threads) {
  env.validate();
  Dataset data;
  data.env = env;
  data.chunk_len = chunk_len;
  data.split = split;
  const auto seeds = split_seeds(env, split, count);
  data.episodes.resize(count);
  parallel_for(count, threads, [&](std::size_t i) {
    data.episodes[i] = generate_expert_episode(env, seeds[i], chunk_len);
  });
  return data;
}

DatasetStats dataset_stats(const Dataset& data) {
  DatasetStats s;
  s.episodes = data.episodes.size();
  if (s.episodes == 0) return s;
  std::size_t feasible = 0;
  double dist = 0.0;
  for (const auto& ep : data.episodes) {
    dist += chebyshev(ep.agent_start, ep.target);
    Vec2 pos = ep.agent_start;
    for (const auto& st : ep.steps) pos = execute_chunk(data.env, pos, st.expert);
    if (chebyshev(pos, ep.target) <= data.env.success_radius) ++feasible;
  }
  s.feasible_rate = static_cast<double>(feasible) / static_cast<double>(s.episodes);
  s.mean_start_distance = dist / static_cast<double>(s.episodes);
  return s;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  using namespace binio;
  std::vector<std::uint8_t> buf;
  put_bytes(buf, kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kDatasetVersion);
  put<std::uint32_t>(buf, data.split == Split::Train ? 0u : 1u);
  put_string(buf, to_json(data.env).dump());
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(data.chunk_len));
  put<std::uint32_t>(buf, kActionDim);
  put<std::uint64_t>(buf, data.episodes.size());
  const std::size_t image_bytes = data.env.grid * data.env.grid * 3;
  for (const auto& ep : data.episodes) {
    put<std::uint64_t>(buf, ep.seed);
    put<float>(buf, ep.agent_start.x);
    put<float>(buf, ep.agent_start.y);
    put<float>(buf, ep.target.x);
    put<float>(buf, ep.target.y);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(ep.color));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(ep.steps.size()));
    for (const auto& st : ep.steps) {
      if (st.image.rgb.size() != image_bytes || st.expert.size() != data.chunk_len * kActionDim) {
        throw DimensionError("episode " + std::to_string(ep.seed) + ": step record does not match the header");
      }
      put<float>(buf, st.agent.x);
      put<float>(buf, st.agent.y);
      put_bytes(buf, st.image.rgb.data(), image_bytes);
      for (float v : st.expert) put<float>(buf, v);
    }
  }
  return buf;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  binio::Reader in(bytes, what);
  char magic[8];
  in.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError(what + ": not a dataset file");
  const auto version = in.get<std::uint32_t>();
  if (version != kDatasetVersion) {
    throw IoError(what + ": unsupported dataset version " + std::to_string(version));
  }
  Dataset data;
  data.split = in.get<std::uint32_t>() == 0 ? Split::Train : Split::Eval;
  try {
    data.env = env_config_from_json(nlohmann::json::parse(in.get_string()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(what + ": bad env header: " + e.what());
  }
  data.chunk_len = in.get<std::uint32_t>();
  if (in.get<std::uint32_t>() != kActionDim) throw IoError(what + ": unsupported action dimension");
  const auto n = in.get<std::uint64_t>();
  const std::size_t image_bytes = data.env.grid * data.env.grid * 3;
  data.episodes.resize(n);
  for (auto& ep : data.episodes) {
    ep.seed = in.get<std::uint64_t>();
    ep.agent_start.x = in.get<float>();
    ep.agent_start.y = in.get<float>();
    ep.target.x = in.get<float>();
    ep.target.y = in.get<float>();
    ep.color = static_cast<int>(in.get<std::uint32_t>());
    ep.steps.resize(in.get<std::uint32_t>());
    for (auto& st : ep.steps) {
      st.agent.x = in.get<float>();
      st.agent.y = in.get<float>();
      st.image.side = data.env.grid;
      st.image.rgb.resize(image_bytes);
      in.get_bytes(st.image.rgb.data(), image_bytes);
      st.expert.resize(data.chunk_len * kActionDim);
      for (auto& v : st.expert) v = in.get<float>();
    }
  }
  if (!in.done()) throw IoError(what + ": trailing bytes");
  return data;
}

void save_dataset(const Dataset& data, const std::string& path) { binio::write_file(path, encode_dataset(data)); }

Dataset load_dataset(const std::string& path) { return decode_dataset(binio::read_file(path), path); }

void export_episodes(const Dataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  for (const auto& ep : data.episodes) {
    const fs::path root = fs::path(dir) / ("episode_" + std::to_string(ep.seed));
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    nlohmann::json meta = {{"seed", ep.seed},
                           {"agent_start", {ep.agent_start.x, ep.agent_start.y}},
                           {"target", {ep.target.x, ep.target.y}},
                           {"color", ep.color},
                           {"steps", ep.steps.size()}};
    std::ofstream(root / "meta.json") << meta.dump(2) << "\n";
    std::ofstream csv(root / "actions.csv");
    csv << "step,agent_x,agent_y";
    for (std::size_t k = 0; k < data.chunk_len; ++k) csv << ",a" << k << "_x,a" << k << "_y";
    csv << "\n";
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& st = ep.steps[t];
      csv << t << "," << st.agent.x << "," << st.agent.y;
      for (float v : st.expert) csv << "," << v;
      csv << "\n";
      std::ofstream ppm(root / ("step_" + std::to_string(t) + ".ppm"), std::ios::binary);
      ppm << "P6\n" << st.image.side << " " << st.image.side << "\n255\n";
      ppm.write(reinterpret_cast<const char*>(st.image.rgb.data()), static_cast<std::streamsize>(st.image.rgb.size()));
      if (!ppm) throw IoError("write failed under " + root.string());
    }
    if (!csv) throw IoError("write failed under " + root.string());
  }
}

}  // namespace ava
