#include "p2v/embeddings_io.hpp"

#include <fstream>

#include <json.hpp>

#include "p2v/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p2v {

namespace {

json record_json(const std::string& scene, const std::string& inst, const std::optional<std::string>& label,
                 const Eigen::VectorXd& v) {
  json j;
  j["scene_id"] = scene;
  j["instance_id"] = inst;
  j["label"] = label ? json(*label) : json(nullptr);
  j["vector"] = std::vector<double>(v.data(), v.data() + v.size());
  return j;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError(path.string() + ": cannot write embeddings");
  return out;
}

}  // namespace

void write_embeddings(const fs::path& path, const std::vector<EmbeddedInstance>& items) {
  auto out = open_out(path);
  for (const auto& it : items)
    out << record_json(it.record.scene_id, it.record.instance_id, it.record.label, it.embedding).dump() << '\n';
}

void write_embeddings(const fs::path& path, const std::vector<EmbeddingRecord>& items) {
  auto out = open_out(path);
  for (const auto& it : items) out << record_json(it.scene_id, it.instance_id, it.label, it.vector).dump() << '\n';
}

std::vector<EmbeddingRecord> read_embeddings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path.string() + ": cannot open embeddings");
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      EmbeddingRecord r;
      r.scene_id = j.value("scene_id", std::string());
      r.instance_id = j.at("instance_id").get<std::string>();
      if (j.contains("label") && !j.at("label").is_null()) r.label = j.at("label").get<std::string>();
      const auto v = j.at("vector").get<std::vector<double>>();
      r.vector = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      if (!out.empty() && out.front().vector.size() != r.vector.size())
        throw LoadError("vector dimension differs from the first record");
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

EmbeddingMatrix stack(const std::vector<EmbeddingRecord>& items) {
  EmbeddingMatrix x(static_cast<Eigen::Index>(items.size()), items.empty() ? 0 : items.front().vector.size());
  for (std::size_t i = 0; i < items.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = items[i].vector.transpose();
  return x;
}

std::vector<std::optional<std::string>> labels_of(const std::vector<EmbeddingRecord>& items) {
  std::vector<std::optional<std::string>> out;
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

std::vector<std::string> qualified_ids(const std::vector<EmbeddingRecord>& items) {
  std::vector<std::string> out;
  for (const auto& it : items) out.push_back(it.scene_id + "/" + it.instance_id);
  return out;
}

std::string resolve_id(const std::vector<EmbeddingRecord>& items, const std::string& id) {
  std::vector<std::string> hits;
  for (const auto& it : items) {
    const std::string q = it.scene_id + "/" + it.instance_id;
    if (q == id) return q;
    if (it.instance_id == id) hits.push_back(q);
  }
  if (hits.empty()) throw InvalidInput("unknown id '" + id + "'");
  if (hits.size() > 1) throw InvalidInput("id '" + id + "' is ambiguous; use scene_id/instance_id");
  return hits.front();
}

}  // namespace p2v
