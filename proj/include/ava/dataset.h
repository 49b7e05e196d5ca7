// SPDX-License-Identifier: Apache-2.0
//
// Expert demonstration splits.
//
// Container layout (little-endian):
//   magic "AVADATA1" | u32 format version | u32 split (0 train, 1 eval) | u32 len, env config JSON
//   u32 chunk_len | u32 action_dim | u64 episode count
//   per episode: u64 seed | f32 start x,y | f32 target x,y | u32 color | u32 steps
//     per step: f32 agent x,y | u8 image[grid*grid*3] | f32 chunk[chunk_len*action_dim]

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ava/config.h"
#include "ava/envsim.h"

namespace ava {

inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
  EnvConfig env;
  std::size_t chunk_len = 0;
  Split split = Split::Train;
  std::vector<Episode> episodes;
};

struct DatasetStats {
  std::size_t episodes = 0;
  double feasible_rate = 0.0;       // expert replay ends inside the success radius
  double mean_start_distance = 0.0;  // Chebyshev, start to target
};

Dataset generate_dataset(const EnvConfig& env, std::size_t chunk_len, Split split, std::size_t count,
                         std::size_t threads = 1);

DatasetStats dataset_stats(const Dataset& data);

std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes, const std::string& what = "dataset");

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

// One directory per episode: meta.json, actions.csv and step_{t}.ppm.
void export_episodes(const Dataset& data, const std::string& dir);

}  // namespace ava
