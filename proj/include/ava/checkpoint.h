// SPDX-License-Identifier: Apache-2.0
//
// Parameter checkpoints.
//
// Layout (little-endian):
//   magic "AVACKPT\0" | u32 format version | u32 len, header JSON
//   u32 tensor count, then per tensor in registration order:
//     u32 len, name | u32 rank | u32 dims[rank] | f32 data[prod(dims)], row-major
// The header holds {"format_version", "mode", "step", "config"} where config
// is the full run configuration.

#pragma once

#include <cstdint>
#include <string>

#include "ava/config.h"
#include "ava/model.h"
#include "ava/recurrence.h"

namespace ava {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Config config;
  PolicyMode mode = PolicyMode::Ava;
  std::size_t step = 0;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const Checkpoint& meta);
void save_checkpoint(const Model& model, const Checkpoint& meta, const std::string& path);

struct LoadedCheckpoint {
  Checkpoint meta;
  Model model;
};

// Rebuilds the model from the stored config and overwrites every parameter.
// Missing, extra or misshapen tensors raise ConfigError.
LoadedCheckpoint load_checkpoint(const std::string& path);
LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint");

// Hex FNV-1a over the file bytes; used to compare runs.
std::string file_digest(const std::string& path);

}  // namespace ava
