#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2v/geometry.hpp"
#include "p2v/random.hpp"

namespace p2v {

enum class Shape { box, sphere, cylinder, plane };

Shape shape_from_string(const std::string& s);
const char* to_string(Shape s);

struct ShapeClass {
  std::string name;
  Shape shape = Shape::box;
  double size_min = 0.5;
  double size_max = 1.0;
};

// Synthetic indoor-like scenes. Each context group gets one center per scene;
// its instances are dropped uniformly inside a disc of `group_radius`
// around that center, so co-occurrence is encoded in the geometry of the
// scene layout. Instances are assigned to groups round-robin and to a class
// uniformly within the group.
struct SyntheticSpec {
  std::vector<ShapeClass> classes;
  std::vector<std::vector<std::string>> groups;  // class names per context group
  int scenes = 12;
  int instances_per_scene = 10;
  double group_radius = 1.0;
  double group_separation = 6.0;  // minimum distance between group centers
  std::size_t points_per_instance = 1000;
  bool random_rotation = true;

  // 4 classes in 2 context groups.
  static SyntheticSpec default_fixture();

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

// Area-uniform samples on the surface of one shape instance of linear size
// `size`, centered at the origin. Aspect ratios are jittered from `rng`.
PointCloud sample_shape(Shape shape, double size, std::size_t n_points, Rng& rng);

// Writes `<out_root>/scene_XXX/` directories in the manifest format and
// returns their paths. Byte-identical output for a given seed.
std::vector<std::filesystem::path> generate_synthetic_scenes(const SyntheticSpec& spec,
                                                             const std::filesystem::path& out_root,
                                                             std::uint64_t seed);

}  // namespace p2v
