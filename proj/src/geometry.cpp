#include "p2v/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Geometry>

#include "p2v/errors.hpp"
#include "p2v/random.hpp"

namespace p2v {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

inline double sq_dist(const PointCloud& a, Eigen::Index i, const PointCloud& b, Eigen::Index j) {
  const double dx = a(i, 0) - b(j, 0);
  const double dy = a(i, 1) - b(j, 1);
  const double dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

// Nearest-neighbour indices in both directions from one pass over all pairs.
void nearest_both(const PointCloud& a, const PointCloud& b, std::vector<double>& a_min,
                  std::vector<Eigen::Index>& a_arg, std::vector<double>& b_min,
                  std::vector<Eigen::Index>& b_arg) {
  const auto na = a.rows();
  const auto nb = b.rows();
  constexpr double inf = std::numeric_limits<double>::infinity();
  a_min.assign(static_cast<std::size_t>(na), inf);
  a_arg.assign(static_cast<std::size_t>(na), 0);
  b_min.assign(static_cast<std::size_t>(nb), inf);
  b_arg.assign(static_cast<std::size_t>(nb), 0);
  for (Eigen::Index i = 0; i < na; ++i) {
    for (Eigen::Index j = 0; j < nb; ++j) {
      const double d = sq_dist(a, i, b, j);
      if (d < a_min[i]) {
        a_min[i] = d;
        a_arg[i] = j;
      }
      if (d < b_min[j]) {
        b_min[j] = d;
        b_arg[j] = i;
      }
    }
  }
}

double golden_min(const PointCloud& a, const PointCloud& b, double lo, double hi, double tol,
                  RotationMatch& best) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  auto eval = [&](double t) {
    const double d = chamfer_distance(rotate_z(a, t), b);
    if (d < best.distance) {
      best.distance = d;
      best.angle = t;
    }
    return d;
  };
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = eval(x1);
  double f2 = eval(x2);
  while (hi - lo > tol) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = eval(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = eval(x2);
    }
  }
  return best.distance;
}

}  // namespace

void require_valid_cloud(const PointCloud& c, const char* what) {
  if (c.rows() == 0) throw InvalidInput(std::string(what) + ": empty point cloud");
  if (!c.allFinite()) throw InvalidInput(std::string(what) + ": non-finite coordinate");
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  require_valid_cloud(a, "chamfer_distance(a)");
  require_valid_cloud(b, "chamfer_distance(b)");
  std::vector<double> a_min, b_min;
  std::vector<Eigen::Index> a_arg, b_arg;
  nearest_both(a, b, a_min, a_arg, b_min, b_arg);
  double sa = 0.0;
  for (double d : a_min) sa += d;
  double sb = 0.0;
  for (double d : b_min) sb += d;
  return sa / static_cast<double>(a.rows()) + sb / static_cast<double>(b.rows());
}

ChamferGradient chamfer_distance_grad(const PointCloud& a, const PointCloud& b) {
  require_valid_cloud(a, "chamfer_distance_grad(a)");
  require_valid_cloud(b, "chamfer_distance_grad(b)");
  std::vector<double> a_min, b_min;
  std::vector<Eigen::Index> a_arg, b_arg;
  nearest_both(a, b, a_min, a_arg, b_min, b_arg);

  const double na = static_cast<double>(a.rows());
  const double nb = static_cast<double>(b.rows());
  ChamferGradient out;
  out.d_b = PointCloud::Zero(b.rows(), 3);
  double sa = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    sa += a_min[i];
    const Eigen::Index j = a_arg[i];
    out.d_b.row(j) += (2.0 / na) * (b.row(j) - a.row(i));
  }
  double sb = 0.0;
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    sb += b_min[j];
    out.d_b.row(j) += (2.0 / nb) * (b.row(j) - a.row(b_arg[j]));
  }
  out.value = sa / na + sb / nb;
  return out;
}

PointCloud rotate_z(const PointCloud& c, double theta) {
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  PointCloud out(c.rows(), 3);
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    const double x = c(i, 0);
    const double y = c(i, 1);
    out(i, 0) = cs * x - sn * y;
    out(i, 1) = sn * x + cs * y;
    out(i, 2) = c(i, 2);
  }
  return out;
}

Centered center(const PointCloud& c) {
  require_valid_cloud(c, "center");
  Centered out;
  out.centroid = c.colwise().mean().transpose();
  out.cloud = c.rowwise() - out.centroid.transpose();
  return out;
}

RotationMatch rotation_optimized_chamfer(const PointCloud& a, const PointCloud& b,
                                         int grid_steps, double refine_tol) {
  if (grid_steps < 4) throw InvalidInput("rotation_optimized_chamfer: grid_steps must be >= 4");
  if (!(refine_tol > 0.0)) throw InvalidInput("rotation_optimized_chamfer: refine_tol must be > 0");
  require_valid_cloud(a, "rotation_optimized_chamfer(a)");
  require_valid_cloud(b, "rotation_optimized_chamfer(b)");

  const double step = kTwoPi / grid_steps;
  RotationMatch best{std::numeric_limits<double>::infinity(), 0.0};
  for (int k = 0; k < grid_steps; ++k) {
    const double t = step * k;
    const double d = chamfer_distance(rotate_z(a, t), b);
    if (d < best.distance) {
      best.distance = d;
      best.angle = t;
    }
  }
  if (best.distance > 0.0) {
    const double c = best.angle;
    golden_min(a, b, c - step, c + step, refine_tol, best);
  }
  best.angle = std::fmod(best.angle, kTwoPi);
  if (best.angle < 0.0) best.angle += kTwoPi;
  return best;
}

void TriangleMesh::validate() const {
  if (faces.size() != face_instance_ids.size())
    throw InvalidInput("TriangleMesh: faces and face_instance_ids differ in length");
  if (!vertices.allFinite()) throw InvalidInput("TriangleMesh: non-finite vertex");
  for (const auto& f : faces)
    for (auto v : f)
      if (v < 0 || v >= vertices.rows()) throw InvalidInput("TriangleMesh: face index out of range");
}

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

PointCloud sample_surface(const TriangleMesh& mesh, const std::string& instance_id,
                          std::size_t n_points, std::uint64_t seed) {
  mesh.validate();
  if (n_points == 0) throw InvalidInput("sample_surface: n_points must be positive");

  std::vector<std::size_t> face_idx;
  std::vector<double> cdf;
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    if (mesh.face_instance_ids[f] != instance_id) continue;
    const auto& tri = mesh.faces[f];
    const double area = triangle_area(mesh.vertices.row(tri[0]).transpose(),
                                      mesh.vertices.row(tri[1]).transpose(),
                                      mesh.vertices.row(tri[2]).transpose());
    if (!(area > 0.0)) continue;
    total += area;
    face_idx.push_back(f);
    cdf.push_back(total);
  }
  if (face_idx.empty())
    throw InvalidInput("sample_surface: instance '" + instance_id + "' has zero surface area");

  Rng rng(seed);
  PointCloud out(static_cast<Eigen::Index>(n_points), 3);
  for (std::size_t i = 0; i < n_points; ++i) {
    const double u = uniform01(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    const auto& tri = mesh.faces[face_idx[static_cast<std::size_t>(it - cdf.begin())]];
    const double r1 = std::sqrt(uniform01(rng));
    const double r2 = uniform01(rng);
    const Vec3 p = (1.0 - r1) * mesh.vertices.row(tri[0]).transpose() +
                   r1 * (1.0 - r2) * mesh.vertices.row(tri[1]).transpose() +
                   r1 * r2 * mesh.vertices.row(tri[2]).transpose();
    out.row(static_cast<Eigen::Index>(i)) = p.transpose();
  }
  return out;
}

}  // namespace p2v
