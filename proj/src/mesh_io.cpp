#include "p2v/mesh_io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "p2v/errors.hpp"

namespace p2v {

namespace {

struct FaceLayout {
  std::vector<std::string> props;  // "__list__" marks the vertex index list
  int list_pos = -1;
  int id_pos = -1;
};

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& msg) {
  throw LoadError(path.string() + ": " + msg);
}

}  // namespace

TriangleMesh read_ply_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(path, "cannot open mesh file");

  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) fail(path, "missing 'ply' magic");

  long long n_vertices = -1, n_faces = -1;
  std::vector<std::string> vertex_props;
  FaceLayout face;
  std::string current;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = (fmt == "ascii");
    } else if (kw == "comment" || kw.empty()) {
      continue;
    } else if (kw == "element") {
      long long count = 0;
      ls >> current >> count;
      if (current == "vertex") n_vertices = count;
      else if (current == "face") n_faces = count;
      else fail(path, "unsupported element '" + current + "'");
    } else if (kw == "property") {
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_t, item_t, name;
        ls >> count_t >> item_t >> name;
        if (current != "face") fail(path, "list property outside face element");
        face.list_pos = static_cast<int>(face.props.size());
        face.props.push_back("__list__");
      } else {
        std::string name;
        ls >> name;
        if (current == "vertex") {
          vertex_props.push_back(name);
        } else {
          if (name == "instance_id" || name == "object_id") face.id_pos = static_cast<int>(face.props.size());
          face.props.push_back(name);
        }
      }
    } else if (kw == "end_header") {
      break;
    } else {
      fail(path, "unexpected header line '" + line + "'");
    }
  }
  if (!ascii) fail(path, "only ASCII PLY is supported");
  if (n_vertices < 0 || n_faces < 0) fail(path, "missing vertex or face element");
  if (face.list_pos < 0 || face.id_pos < 0) fail(path, "face element needs a vertex list and instance_id");

  int ix = -1, iy = -1, iz = -1;
  for (int i = 0; i < static_cast<int>(vertex_props.size()); ++i) {
    if (vertex_props[i] == "x") ix = i;
    if (vertex_props[i] == "y") iy = i;
    if (vertex_props[i] == "z") iz = i;
  }
  if (ix < 0 || iy < 0 || iz < 0) fail(path, "vertex element needs x, y, z");

  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices, 3);
  std::vector<double> vals(vertex_props.size());
  for (long long v = 0; v < n_vertices; ++v) {
    if (!std::getline(in, line)) fail(path, "truncated vertex list");
    std::istringstream ls(line);
    for (auto& x : vals)
      if (!(ls >> x)) fail(path, "malformed vertex line " + std::to_string(v));
    mesh.vertices(v, 0) = vals[ix];
    mesh.vertices(v, 1) = vals[iy];
    mesh.vertices(v, 2) = vals[iz];
  }

  for (long long f = 0; f < n_faces; ++f) {
    if (!std::getline(in, line)) fail(path, "truncated face list");
    std::istringstream ls(line);
    std::vector<std::int64_t> corners;
    std::string id;
    for (int p = 0; p < static_cast<int>(face.props.size()); ++p) {
      if (p == face.list_pos) {
        int n = 0;
        if (!(ls >> n) || n < 3) fail(path, "face " + std::to_string(f) + " has fewer than 3 corners");
        corners.resize(static_cast<std::size_t>(n));
        for (auto& c : corners)
          if (!(ls >> c)) fail(path, "malformed face line " + std::to_string(f));
      } else {
        std::string tok;
        if (!(ls >> tok)) fail(path, "malformed face line " + std::to_string(f));
        if (p == face.id_pos) id = tok;
      }
    }
    for (std::size_t k = 1; k + 1 < corners.size(); ++k) {
      mesh.faces.push_back({corners[0], corners[k], corners[k + 1]});
      mesh.face_instance_ids.push_back(id);
    }
  }
  try {
    mesh.validate();
  } catch (const InvalidInput& e) {
    fail(path, e.what());
  }
  return mesh;
}

void write_ply_mesh(const std::filesystem::path& path, const TriangleMesh& mesh) {
  mesh.validate();
  std::ofstream out(path);
  if (!out) throw LoadError(path.string() + ": cannot write mesh file");
  out << "ply\nformat ascii 1.0\n"
      << "element vertex " << mesh.vertices.rows() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "element face " << mesh.faces.size() << "\n"
      << "property list uchar int vertex_indices\nproperty int instance_id\nend_header\n";
  out << std::setprecision(9);
  for (Eigen::Index v = 0; v < mesh.vertices.rows(); ++v)
    out << mesh.vertices(v, 0) << ' ' << mesh.vertices(v, 1) << ' ' << mesh.vertices(v, 2) << '\n';
  for (std::size_t f = 0; f < mesh.faces.size(); ++f)
    out << "3 " << mesh.faces[f][0] << ' ' << mesh.faces[f][1] << ' ' << mesh.faces[f][2] << ' '
        << mesh.face_instance_ids[f] << '\n';
}

}  // namespace p2v
