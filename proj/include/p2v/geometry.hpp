#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace p2v {

// N x 3 points in meters, one point per row.
using PointCloud = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Vec3 = Eigen::Vector3d;

// Throws InvalidInput when `c` is empty or holds a non-finite coordinate.
void require_valid_cloud(const PointCloud& c, const char* what);

// Size-normalized two-sided squared chamfer distance:
//   (1/|a|) sum_p min_q |p-q|^2 + (1/|b|) sum_q min_p |p-q|^2
double chamfer_distance(const PointCloud& a, const PointCloud& b);

struct ChamferGradient {
  double value = 0.0;
  PointCloud d_b;  // d value / d b, same shape as b
};

// Chamfer value plus its gradient with respect to the second cloud. Nearest
// neighbours are treated as locally constant (the usual subgradient).
ChamferGradient chamfer_distance_grad(const PointCloud& a, const PointCloud& b);

PointCloud rotate_z(const PointCloud& c, double theta);

struct Centered {
  PointCloud cloud;
  Vec3 centroid = Vec3::Zero();
};

Centered center(const PointCloud& c);

struct RotationMatch {
  double distance = 0.0;
  double angle = 0.0;  // in [0, 2*pi)
};

// Minimizes chamfer_distance(rotate_z(a, theta), b) over theta: a uniform grid
// of `grid_steps` angles, then golden-section refinement inside the best cell.
// The returned angle is the z-rotation that carries `a` onto `b`.
RotationMatch rotation_optimized_chamfer(const PointCloud& a, const PointCloud& b,
                                         int grid_steps = 36, double refine_tol = 1e-3);

struct TriangleMesh {
  PointCloud vertices;
  std::vector<std::array<std::int64_t, 3>> faces;
  std::vector<std::string> face_instance_ids;  // parallel to faces

  // Index range and parallel-array checks; throws InvalidInput.
  void validate() const;
};

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c);

// Area-weighted uniform sampling over the faces tagged `instance_id`.
// Zero-area faces are never sampled.
PointCloud sample_surface(const TriangleMesh& mesh, const std::string& instance_id,
                          std::size_t n_points, std::uint64_t seed);

}  // namespace p2v
