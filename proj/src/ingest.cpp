#include "p2v/ingest.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "p2v/errors.hpp"
#include "p2v/hash.hpp"
#include "p2v/mesh_io.hpp"
#include "p2v/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p2v {

namespace {

constexpr char kPointsMagic[4] = {'P', '2', 'V', 'C'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::size_t count_distinct(const PointCloud& c) {
  std::set<std::array<double, 3>> seen;
  for (Eigen::Index i = 0; i < c.rows(); ++i) seen.insert({c(i, 0), c(i, 1), c(i, 2)});
  return seen.size();
}

PointCloud to_float_precision(const PointCloud& c) {
  return c.cast<float>().cast<double>();
}

PointCloud resize_cloud(const PointCloud& c, std::size_t target, Rng& rng) {
  const auto n = static_cast<std::size_t>(c.rows());
  if (n == target) return c;
  PointCloud out(static_cast<Eigen::Index>(target), 3);
  if (n < target) {
    out.topRows(c.rows()) = c;
    for (std::size_t i = n; i < target; ++i)
      out.row(static_cast<Eigen::Index>(i)) = c.row(static_cast<Eigen::Index>(uniform_index(rng, n)));
    return out;
  }
  std::vector<Eigen::Index> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<Eigen::Index>(i);
  shuffle(idx, rng);
  idx.resize(target);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < target; ++i) out.row(static_cast<Eigen::Index>(i)) = c.row(idx[i]);
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace

bool operator==(const InstanceRecord& a, const InstanceRecord& b) {
  return a.scene_id == b.scene_id && a.instance_id == b.instance_id && a.label == b.label &&
         a.centroid == b.centroid && a.cloud.rows() == b.cloud.rows() &&
         (a.cloud.array() == b.cloud.array()).all();
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation" || s == "val") return Split::validation;
  if (s == "test") return Split::test;
  throw InvalidInput("unknown split '" + s + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    auto it = split.find(instances[i].scene_id);
    if (it != split.end() && it->second == s) out.push_back(i);
  }
  return out;
}

std::vector<InstanceRecord> Dataset::subset(Split s) const {
  std::vector<InstanceRecord> out;
  for (auto i : indices(s)) out.push_back(instances[i]);
  return out;
}

void Dataset::validate() const {
  for (const auto& r : instances)
    if (!split.contains(r.scene_id))
      throw InvalidInput("dataset: scene '" + r.scene_id + "' has no split assignment");
}

PointCloud read_points_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open points file");
  unsigned char header[8];
  if (!in.read(reinterpret_cast<char*>(header), 8)) throw LoadError(path.string() + ": truncated header");
  if (std::memcmp(header, kPointsMagic, 4) != 0) throw LoadError(path.string() + ": bad magic");
  const std::uint32_t n = get_u32(header + 4);
  std::vector<unsigned char> body(static_cast<std::size_t>(n) * 12);
  if (!in.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(body.size())))
    throw LoadError(path.string() + ": truncated point data");
  PointCloud c(n, 3);
  for (std::uint32_t i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k)
      c(i, k) = std::bit_cast<float>(get_u32(body.data() + 12 * i + 4 * k));
  return c;
}

void write_points_file(const fs::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError(path.string() + ": cannot write points file");
  out.write(kPointsMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(cloud.rows()));
  for (Eigen::Index i = 0; i < cloud.rows(); ++i)
    for (int k = 0; k < 3; ++k) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(cloud(i, k))));
}

SceneLoad load_scene(const fs::path& dir, std::size_t points_per_instance, std::uint64_t seed) {
  if (points_per_instance == 0) throw InvalidInput("load_scene: points_per_instance must be positive");
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw LoadError(manifest_path.string() + ": missing manifest");
  const json manifest = read_json(manifest_path);

  SceneLoad out;
  std::string scene_id;
  try {
    scene_id = manifest.at("scene_id").get<std::string>();
    if (!manifest.at("instances").is_array()) throw LoadError("'instances' is not an array");
  } catch (const json::exception& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  const std::uint64_t scene_hash = fnv1a(scene_id);

  std::map<std::string, TriangleMesh> meshes;
  for (const auto& entry : manifest.at("instances")) {
    InstanceRecord rec;
    rec.scene_id = scene_id;
    try {
      rec.instance_id = entry.at("instance_id").get<std::string>();
      if (entry.contains("label") && !entry.at("label").is_null()) rec.label = entry.at("label").get<std::string>();
    } catch (const json::exception& e) {
      throw LoadError(manifest_path.string() + ": " + e.what());
    }
    Rng rng = derive_rng(seed, scene_hash, fnv1a(rec.instance_id));

    PointCloud raw;
    if (entry.contains("points_file")) {
      raw = read_points_file(dir / entry.at("points_file").get<std::string>());
      if (raw.rows() == 0) {
        out.warnings.push_back({scene_id, rec.instance_id, "no points"});
        continue;
      }
      if (!raw.allFinite()) {
        out.warnings.push_back({scene_id, rec.instance_id, "non-finite coordinates"});
        continue;
      }
      raw = resize_cloud(raw, points_per_instance, rng);
    } else if (entry.contains("mesh_ref")) {
      const auto ref = entry.at("mesh_ref").get<std::string>();
      auto it = meshes.find(ref);
      if (it == meshes.end()) it = meshes.emplace(ref, read_ply_mesh(dir / ref)).first;
      try {
        raw = to_float_precision(sample_surface(it->second, rec.instance_id, points_per_instance, rng()));
      } catch (const InvalidInput&) {
        out.warnings.push_back({scene_id, rec.instance_id, "no faces with positive area"});
        continue;
      }
    } else {
      throw LoadError(manifest_path.string() + ": instance '" + rec.instance_id +
                      "' has neither points_file nor mesh_ref");
    }
    if (count_distinct(raw) < 4) {
      out.warnings.push_back({scene_id, rec.instance_id, "fewer than 4 distinct points"});
      continue;
    }
    auto centered = center(raw);
    rec.cloud = std::move(centered.cloud);
    rec.centroid = centered.centroid;
    out.records.push_back(std::move(rec));
  }
  return out;
}

std::map<std::string, Split> make_split(std::vector<std::string> scene_ids, int n_val, int n_test,
                                        std::uint64_t seed) {
  std::sort(scene_ids.begin(), scene_ids.end());
  scene_ids.erase(std::unique(scene_ids.begin(), scene_ids.end()), scene_ids.end());
  if (n_val < 0 || n_test < 0) throw InvalidInput("make_split: negative split size");
  if (static_cast<std::size_t>(n_val + n_test) >= scene_ids.size())
    throw InvalidInput("make_split: need more scenes than n_val + n_test (" + std::to_string(scene_ids.size()) +
                       " scenes)");
  Rng rng(seed);
  shuffle(scene_ids, rng);
  std::map<std::string, Split> out;
  for (std::size_t i = 0; i < scene_ids.size(); ++i) {
    Split s = Split::train;
    if (i < static_cast<std::size_t>(n_val)) s = Split::validation;
    else if (i < static_cast<std::size_t>(n_val + n_test)) s = Split::test;
    out[scene_ids[i]] = s;
  }
  return out;
}

void write_split_file(const fs::path& path, const std::map<std::string, Split>& split) {
  json j = json::object();
  for (const auto& [scene, s] : split) j[scene] = to_string(s);
  std::ofstream out(path);
  if (!out) throw LoadError(path.string() + ": cannot write");
  out << j.dump(2) << '\n';
}

std::map<std::string, Split> read_split_file(const fs::path& path) {
  const json j = read_json(path);
  std::map<std::string, Split> out;
  for (const auto& [scene, s] : j.items()) out[scene] = split_from_string(s.get<std::string>());
  return out;
}

DatasetLoad load_dataset(const fs::path& root, const LoadOptions& opts) {
  if (!fs::is_directory(root)) throw LoadError(root.string() + ": not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw LoadError(root.string() + ": no scene directories with manifest.json");

  DatasetLoad out;
  std::vector<std::string> scene_ids;
  for (const auto& d : dirs) {
    auto scene = load_scene(d, opts.points_per_instance, opts.seed);
    std::string scene_id;
    try {
      scene_id = read_json(d / "manifest.json").at("scene_id").get<std::string>();
    } catch (const json::exception& e) {
      throw LoadError(d.string() + ": " + e.what());
    }
    scene_ids.push_back(scene_id);
    for (auto& r : scene.records) out.dataset.instances.push_back(std::move(r));
    for (auto& w : scene.warnings) out.warnings.push_back(std::move(w));
  }
  if (fs::exists(root / "split.json")) {
    out.dataset.split = read_split_file(root / "split.json");
  } else {
    out.dataset.split = make_split(scene_ids, opts.n_val, opts.n_test, opts.seed);
  }
  out.dataset.validate();
  return out;
}

void write_scene(const fs::path& dir, const std::string& scene_id, const std::vector<InstanceRecord>& records) {
  fs::create_directories(dir);
  json manifest;
  manifest["scene_id"] = scene_id;
  manifest["instances"] = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string file = "inst_" + std::to_string(i) + ".p2vc";
    PointCloud raw = r.cloud.rowwise() + r.centroid.transpose();
    write_points_file(dir / file, raw);
    json entry;
    entry["instance_id"] = r.instance_id;
    if (r.label) entry["label"] = *r.label;
    entry["points_file"] = file;
    manifest["instances"].push_back(entry);
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw LoadError((dir / "manifest.json").string() + ": cannot write");
  out << manifest.dump(2) << '\n';
}

void write_dataset(const fs::path& root, const Dataset& dataset) {
  dataset.validate();
  fs::create_directories(root);
  std::map<std::string, std::vector<InstanceRecord>> by_scene;
  for (const auto& [scene, s] : dataset.split) by_scene[scene];
  for (const auto& r : dataset.instances) by_scene[r.scene_id].push_back(r);
  for (const auto& [scene, recs] : by_scene) write_scene(root / scene, scene, recs);
  write_split_file(root / "split.json", dataset.split);
}

}  // namespace p2v
