#pragma once

#include <filesystem>

#include "p2v/geometry.hpp"

namespace p2v {

// ASCII PLY subset: vertex x/y/z plus a face element with a vertex index list
// and an integer `instance_id`. Polygons with more than three corners are
// split into a triangle fan from the first corner (quads along the 0-2
// diagonal). See docs/dataset-format.md.
TriangleMesh read_ply_mesh(const std::filesystem::path& path);

void write_ply_mesh(const std::filesystem::path& path, const TriangleMesh& mesh);

}  // namespace p2v
