#include "p2v/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "p2v/errors.hpp"
#include "p2v/ingest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace p2v {

namespace {

Vec3 on_box(const Vec3& half, Rng& rng) {
  const double axy = half.x() * half.y(), axz = half.x() * half.z(), ayz = half.y() * half.z();
  const double u = uniform(rng, 0.0, 2.0 * (axy + axz + ayz));
  const double a = uniform(rng, -1.0, 1.0), b = uniform(rng, -1.0, 1.0);
  const double side = u < (axy + axz + ayz) ? 1.0 : -1.0;
  const double v = std::fmod(u, axy + axz + ayz);
  if (v < axy) return {a * half.x(), b * half.y(), side * half.z()};
  if (v < axy + axz) return {a * half.x(), side * half.y(), b * half.z()};
  return {side * half.x(), a * half.y(), b * half.z()};
}

Vec3 on_sphere(double r, Rng& rng) {
  Vec3 v(normal(rng), normal(rng), normal(rng));
  while (v.norm() == 0.0) v = Vec3(normal(rng), normal(rng), normal(rng));
  return r * v.normalized();
}

Vec3 on_cylinder(double r, double h, Rng& rng) {
  const double side = 2.0 * M_PI * r * h;
  const double cap = M_PI * r * r;
  const double u = uniform(rng, 0.0, side + 2.0 * cap);
  const double phi = uniform(rng, 0.0, 2.0 * M_PI);
  if (u < side) return {r * std::cos(phi), r * std::sin(phi), uniform(rng, -h / 2, h / 2)};
  const double rho = r * std::sqrt(uniform01(rng));
  const double z = u < side + cap ? h / 2 : -h / 2;
  return {rho * std::cos(phi), rho * std::sin(phi), z};
}

}  // namespace

Shape shape_from_string(const std::string& s) {
  if (s == "box") return Shape::box;
  if (s == "sphere") return Shape::sphere;
  if (s == "cylinder") return Shape::cylinder;
  if (s == "plane") return Shape::plane;
  throw InvalidInput("unknown shape '" + s + "'");
}

const char* to_string(Shape s) {
  switch (s) {
    case Shape::box: return "box";
    case Shape::sphere: return "sphere";
    case Shape::cylinder: return "cylinder";
    case Shape::plane: return "plane";
  }
  return "?";
}

SyntheticSpec SyntheticSpec::default_fixture() {
  SyntheticSpec s;
  s.classes = {{"box", Shape::box, 0.6, 1.2},
               {"cylinder", Shape::cylinder, 0.6, 1.2},
               {"sphere", Shape::sphere, 0.6, 1.2},
               {"plane", Shape::plane, 0.6, 1.2}};
  s.groups = {{"box", "cylinder"}, {"sphere", "plane"}};
  return s;
}

void SyntheticSpec::validate() const {
  if (classes.empty() || groups.empty()) throw InvalidInput("synthetic spec: no classes or groups");
  if (scenes < 1 || instances_per_scene < 1) throw InvalidInput("synthetic spec: scenes and instances must be >= 1");
  if (!(group_radius > 0.0) || group_separation < 0.0) throw InvalidInput("synthetic spec: bad radius/separation");
  if (points_per_instance == 0) throw InvalidInput("synthetic spec: points_per_instance must be positive");
  std::map<std::string, int> known;
  for (const auto& c : classes) {
    if (!(c.size_min > 0.0) || c.size_max < c.size_min) throw InvalidInput("synthetic spec: bad size range for " + c.name);
    known[c.name] = 1;
  }
  for (const auto& g : groups) {
    if (g.empty()) throw InvalidInput("synthetic spec: empty context group");
    for (const auto& n : g)
      if (!known.contains(n)) throw InvalidInput("synthetic spec: group names unknown class '" + n + "'");
  }
}

void to_json(json& j, const SyntheticSpec& s) {
  j = json::object();
  j["classes"] = json::array();
  for (const auto& c : s.classes)
    j["classes"].push_back({{"name", c.name}, {"shape", to_string(c.shape)}, {"size_min", c.size_min},
                            {"size_max", c.size_max}});
  j["groups"] = s.groups;
  j["scenes"] = s.scenes;
  j["instances_per_scene"] = s.instances_per_scene;
  j["group_radius"] = s.group_radius;
  j["group_separation"] = s.group_separation;
  j["points_per_instance"] = s.points_per_instance;
  j["random_rotation"] = s.random_rotation;
}

void from_json(const json& j, SyntheticSpec& s) {
  s = SyntheticSpec{};
  for (const auto& c : j.at("classes"))
    s.classes.push_back({c.at("name").get<std::string>(), shape_from_string(c.at("shape").get<std::string>()),
                         c.value("size_min", 0.5), c.value("size_max", 1.0)});
  s.groups = j.at("groups").get<std::vector<std::vector<std::string>>>();
  s.scenes = j.value("scenes", s.scenes);
  s.instances_per_scene = j.value("instances_per_scene", s.instances_per_scene);
  s.group_radius = j.value("group_radius", s.group_radius);
  s.group_separation = j.value("group_separation", s.group_separation);
  s.points_per_instance = j.value("points_per_instance", s.points_per_instance);
  s.random_rotation = j.value("random_rotation", s.random_rotation);
}

PointCloud sample_shape(Shape shape, double size, std::size_t n_points, Rng& rng) {
  PointCloud out(static_cast<Eigen::Index>(n_points), 3);
  const double j1 = uniform(rng, 0.7, 1.3), j2 = uniform(rng, 0.7, 1.3), j3 = uniform(rng, 0.7, 1.3);
  for (std::size_t i = 0; i < n_points; ++i) {
    Vec3 p;
    switch (shape) {
      case Shape::box: p = on_box(0.5 * size * Vec3(j1, j2, j3), rng); break;
      case Shape::sphere: p = on_sphere(0.5 * size, rng); break;
      case Shape::cylinder: p = on_cylinder(0.5 * size * j1, size * j2, rng); break;
      case Shape::plane: p = Vec3(uniform(rng, -0.5, 0.5) * size * j1, uniform(rng, -0.5, 0.5) * size * j2, 0.0); break;
    }
    out.row(static_cast<Eigen::Index>(i)) = p.transpose();
  }
  return out;
}

std::vector<fs::path> generate_synthetic_scenes(const SyntheticSpec& spec, const fs::path& out_root,
                                                std::uint64_t seed) {
  spec.validate();
  std::map<std::string, const ShapeClass*> by_name;
  for (const auto& c : spec.classes) by_name[c.name] = &c;

  Rng rng(seed);
  std::vector<fs::path> dirs;
  const std::size_t n_groups = spec.groups.size();
  const double extent = spec.group_separation * static_cast<double>(n_groups) + spec.group_radius;
  for (int s = 0; s < spec.scenes; ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03d", s);
    const std::string scene_id = name;

    std::vector<Vec3> centers;
    for (std::size_t g = 0; g < n_groups; ++g) {
      Vec3 c;
      for (int attempt = 0;; ++attempt) {
        c = Vec3(uniform(rng, -extent, extent), uniform(rng, -extent, extent), 0.0);
        bool ok = true;
        for (const auto& o : centers) ok = ok && (o - c).norm() >= spec.group_separation;
        if (ok || attempt > 1000) break;
      }
      centers.push_back(c);
    }

    std::vector<InstanceRecord> records;
    for (int i = 0; i < spec.instances_per_scene; ++i) {
      const std::size_t g = static_cast<std::size_t>(i) % n_groups;
      const auto& group = spec.groups[g];
      const ShapeClass& cls = *by_name.at(group[uniform_index(rng, group.size())]);
      const double size = uniform(rng, cls.size_min, cls.size_max);
      PointCloud cloud = sample_shape(cls.shape, size, spec.points_per_instance, rng);
      if (spec.random_rotation) cloud = rotate_z(cloud, uniform(rng, 0.0, 2.0 * M_PI));
      cloud = center(cloud).cloud;
      const double rho = spec.group_radius * std::sqrt(uniform01(rng));
      const double phi = uniform(rng, 0.0, 2.0 * M_PI);
      const Vec3 pos = centers[g] + Vec3(rho * std::cos(phi), rho * std::sin(phi), 0.0);

      InstanceRecord rec;
      rec.scene_id = scene_id;
      char iname[48];
      std::snprintf(iname, sizeof iname, "%s_%03d", cls.name.c_str(), i);
      rec.instance_id = iname;
      rec.label = cls.name;
      rec.centroid = pos;
      rec.cloud = cloud;
      records.push_back(std::move(rec));
    }
    const fs::path dir = out_root / scene_id;
    write_scene(dir, scene_id, records);
    dirs.push_back(dir);
  }
  return dirs;
}

}  // namespace p2v
