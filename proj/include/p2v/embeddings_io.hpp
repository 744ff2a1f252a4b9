#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "p2v/eval.hpp"
#include "p2v/trainer.hpp"

namespace p2v {

// One line per instance: {"scene_id", "instance_id", "label", "vector": [...]}.
struct EmbeddingRecord {
  std::string scene_id;
  std::string instance_id;
  std::optional<std::string> label;
  Eigen::VectorXd vector;
};

void write_embeddings(const std::filesystem::path& path, const std::vector<EmbeddedInstance>& items);
void write_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& items);
std::vector<EmbeddingRecord> read_embeddings(const std::filesystem::path& path);

EmbeddingMatrix stack(const std::vector<EmbeddingRecord>& items);
std::vector<std::optional<std::string>> labels_of(const std::vector<EmbeddingRecord>& items);
// "scene_id/instance_id" for every record.
std::vector<std::string> qualified_ids(const std::vector<EmbeddingRecord>& items);

// Accepts "scene/instance" or a bare instance id that is unique in `items`.
std::string resolve_id(const std::vector<EmbeddingRecord>& items, const std::string& id);

}  // namespace p2v
