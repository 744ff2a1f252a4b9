#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "p2v/geometry.hpp"

namespace p2v {

// One segmented object. `label` exists only for evaluation; nothing in the
// sampler, model, losses or trainer reads it.
struct InstanceRecord {
  std::string scene_id;
  std::string instance_id;
  std::optional<std::string> label;
  Vec3 centroid = Vec3::Zero();  // position in the scene before centering
  PointCloud cloud;              // centered, points_per_instance rows
};

// Exact (bitwise-value) equality of every field.
bool operator==(const InstanceRecord& a, const InstanceRecord& b);

enum class Split { train, validation, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
  std::vector<InstanceRecord> instances;
  std::map<std::string, Split> split;  // scene_id -> split

  // Indices of instances whose scene belongs to `s`, in dataset order.
  std::vector<std::size_t> indices(Split s) const;
  std::vector<InstanceRecord> subset(Split s) const;
  // Every scene_id must be covered by `split`; throws InvalidInput.
  void validate() const;
};

struct LoadWarning {
  std::string scene_id;
  std::string instance_id;
  std::string reason;
};

struct SceneLoad {
  std::vector<InstanceRecord> records;
  std::vector<LoadWarning> warnings;
};

inline constexpr std::size_t kDefaultPointsPerInstance = 1000;

// Reads `<dir>/manifest.json`. Point-file instances are resized to
// points_per_instance (padded with random duplicates or randomly
// subsampled); mesh instances are surface-sampled. Points are kept at
// float32 precision before centering so records survive write/reload.
SceneLoad load_scene(const std::filesystem::path& dir,
                     std::size_t points_per_instance = kDefaultPointsPerInstance,
                     std::uint64_t seed = 0);

// Deterministic scene-level split; scene ids are sorted before shuffling.
std::map<std::string, Split> make_split(std::vector<std::string> scene_ids, int n_val = 1,
                                        int n_test = 1, std::uint64_t seed = 0);

struct LoadOptions {
  std::size_t points_per_instance = kDefaultPointsPerInstance;
  std::uint64_t seed = 0;
  int n_val = 1;
  int n_test = 1;
};

struct DatasetLoad {
  Dataset dataset;
  std::vector<LoadWarning> warnings;
};

// Loads every scene directory under `root` (sorted by name). Uses
// `<root>/split.json` when present, otherwise make_split.
DatasetLoad load_dataset(const std::filesystem::path& root, const LoadOptions& opts = {});

// Writes records as a points-file scene (manifest.json + one .p2vc per instance).
void write_scene(const std::filesystem::path& dir, const std::string& scene_id,
                 const std::vector<InstanceRecord>& records);

// One directory per scene plus split.json.
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);

// Binary point file: "P2VC", uint32 N, N*3 float32, all little-endian.
PointCloud read_points_file(const std::filesystem::path& path);
void write_points_file(const std::filesystem::path& path, const PointCloud& cloud);

void write_split_file(const std::filesystem::path& path, const std::map<std::string, Split>& split);
std::map<std::string, Split> read_split_file(const std::filesystem::path& path);

}  // namespace p2v
