#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "p2v/model.hpp"

namespace p2v {

// Binary container, little-endian (layout in docs/checkpoint.md):
//   "P2VK" | u32 version | u32 header bytes | JSON header |
//   u64 weight count | f64 weights | u64 state count | f64 state
// The JSON header carries the model config under "model" and whatever the
// caller puts in `meta` (hyperparameters, seed, epoch).
struct Checkpoint {
  Model model;
  nlohmann::json meta;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace p2v
