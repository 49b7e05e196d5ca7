// SPDX-License-Identifier: Apache-2.0

#include "ava/checkpoint.h"

#include <cstdio>
#include <unordered_set>

#include "ava/binio.h"
#include "ava/rng.h"

namespace ava {

namespace {

constexpr char kMagic[8] = {'A', 'V', 'A', 'C', 'K', 'P', 'T', '\0'};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const Checkpoint& meta) {
  using namespace binio;
  std::vector<std::uint8_t> buf;
  put_bytes(buf, kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kCheckpointVersion);
  const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                 {"mode", to_string(meta.mode)},
                                 {"step", meta.step},
                                 {"config", to_json(meta.config)}};
  put_string(buf, header.dump());
  const auto& params = model.params();
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.count()));
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& p = params.at(i);
    put_string(buf, p.name);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.value.shape.size()));
    for (auto d : p.value.shape) put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    for (double v : p.value.data) put<float>(buf, static_cast<float>(v));
  }
  return buf;
}

void save_checkpoint(const Model& model, const Checkpoint& meta, const std::string& path) {
  binio::write_file(path, encode_checkpoint(model, meta));
}

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  binio::Reader in(bytes, what);
  char magic[8];
  in.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError(what + ": not a checkpoint file");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint meta;
  try {
    const auto header = nlohmann::json::parse(in.get_string());
    meta.config = config_from_json(header.at("config"));
    meta.mode = policy_mode_from_string(header.at("mode").get<std::string>());
    meta.step = header.at("step").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(what + ": bad header: " + e.what());
  }
  Model model(meta.config.model, meta.config.train.seed);
  auto& params = model.params();
  const auto n = in.get<std::uint32_t>();
  if (n != params.count()) {
    throw ConfigError(what + ": holds " + std::to_string(n) + " tensors, model has " +
                      std::to_string(params.count()));
  }
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = in.get_string();
    if (!params.contains(name)) throw ConfigError(what + ": unknown tensor " + name);
    if (!seen.insert(name).second) throw ConfigError(what + ": duplicate tensor " + name);
    Parameter& p = params.get(name);
    Shape shape(in.get<std::uint32_t>());
    for (auto& d : shape) d = in.get<std::uint32_t>();
    if (shape != p.value.shape) {
      throw ConfigError(what + ": tensor " + name + " has shape " + shape_str(shape) + ", model expects " +
                        shape_str(p.value.shape));
    }
    for (auto& v : p.value.data) v = static_cast<double>(in.get<float>());
  }
  if (!in.done()) throw IoError(what + ": trailing bytes");
  return LoadedCheckpoint{meta, std::move(model)};
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path), path); }

std::string file_digest(const std::string& path) {
  const auto bytes = binio::read_file(path);
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

}  // namespace ava
